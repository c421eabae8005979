#pragma once

#include <cstdio>
#include <filesystem>
#include <span>

#include "cubemask/core.hpp"
#include "cubemask/quantizer.hpp"

namespace cubemask::io {

uint32_t crc32(std::span<const uint8_t> bytes, uint32_t seed = 0);

enum class Dtype : uint8_t { F32 = 0, F64 = 1, U8 = 2, U16 = 3, U32 = 4, U64 = 5 };

size_t dtype_size(Dtype t);

/// Little-endian byte sink/cursor used by every on-disk format.
class Writer {
  public:
    void u8(uint8_t v) { buf_.push_back(v); }
    void u16(uint16_t v);
    void u32(uint32_t v);
    void u64(uint64_t v);
    void f32(float v);
    void bytes(std::span<const uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    void str(std::string_view s);

    std::vector<uint8_t>& data() { return buf_; }
    const std::vector<uint8_t>& data() const { return buf_; }

  private:
    std::vector<uint8_t> buf_;
};

class Reader {
  public:
    explicit Reader(std::span<const uint8_t> bytes) : bytes_(bytes) {}

    uint8_t u8();
    uint16_t u16();
    uint32_t u32();
    uint64_t u64();
    float f32();
    std::span<const uint8_t> bytes(size_t n);
    std::string str(size_t n);
    size_t remaining() const { return bytes_.size() - pos_; }
    size_t pos() const { return pos_; }

  private:
    void need(size_t n) const;
    std::span<const uint8_t> bytes_;
    size_t pos_ = 0;
};

/// One named tensor blob inside a manifest section.
struct Blob {
    std::string name;
    Dtype dtype = Dtype::U8;
    std::vector<uint64_t> shape;
    std::vector<uint8_t> payload;

    uint64_t elements() const;
};

/// Section layout: u32 blob count, the per-blob manifest entries
/// (name, dtype tag, shape, byte length), then the raw payloads in order.
void write_section(Writer& w, std::span<const Blob> blobs);
std::vector<Blob> read_section(Reader& r);

std::vector<uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes);

// --- feature corpus files: magic "CUBF" ------------------------------------
void write_features(const std::filesystem::path& path, std::span<const FeatureTensor> corpus);
std::vector<FeatureTensor> read_features(const std::filesystem::path& path);
/// Header + payload + checksum size for a corpus of `count` tensors.
size_t feature_file_size(const Shape3& shape, uint64_t count);

// --- token tensor files: magic "CUBQ" ---------------------------------------
void write_tokens(const std::filesystem::path& path, const TokenTensor& q);
TokenTensor read_tokens(const std::filesystem::path& path);
size_t token_file_size(const Shape3& shape, uint32_t levels);

// --- quantizer spec files (JSON) --------------------------------------------
void save_quantizer_spec(const std::filesystem::path& path, const QuantizerSpec& spec);
QuantizerSpec load_quantizer_spec(const std::filesystem::path& path);

}  // namespace cubemask::io
