#include "cubemask/io.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace cubemask::io {

namespace {

std::array<uint32_t, 256> make_crc_table() {
    std::array<uint32_t, 256> table{};
    for (uint32_t n = 0; n < 256; ++n) {
        uint32_t c = n;
        for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
        table[n] = c;
    }
    return table;
}

const std::array<uint32_t, 256>& crc_table() {
    static const auto table = make_crc_table();
    return table;
}

}  // namespace

uint32_t crc32(std::span<const uint8_t> bytes, uint32_t seed) {
    const auto& table = crc_table();
    uint32_t c = seed ^ 0xFFFFFFFFu;
    for (uint8_t b : bytes) c = table[(c ^ b) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

size_t dtype_size(Dtype t) {
    switch (t) {
        case Dtype::F32: return 4;
        case Dtype::F64: return 8;
        case Dtype::U8: return 1;
        case Dtype::U16: return 2;
        case Dtype::U32: return 4;
        case Dtype::U64: return 8;
    }
    throw DataError("unknown dtype tag");
}

void Writer::u16(uint16_t v) {
    buf_.push_back(static_cast<uint8_t>(v));
    buf_.push_back(static_cast<uint8_t>(v >> 8));
}

void Writer::u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void Writer::u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void Writer::f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
}

void Writer::str(std::string_view s) {
    buf_.insert(buf_.end(), s.begin(), s.end());
}

void Reader::need(size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("truncated input");
}

uint8_t Reader::u8() {
    need(1);
    return bytes_[pos_++];
}

uint16_t Reader::u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
}

uint32_t Reader::u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
}

uint64_t Reader::u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
}

float Reader::f32() {
    const uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

std::span<const uint8_t> Reader::bytes(size_t n) {
    need(n);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
}

std::string Reader::str(size_t n) {
    auto b = bytes(n);
    return std::string(b.begin(), b.end());
}

uint64_t Blob::elements() const {
    uint64_t n = 1;
    for (uint64_t s : shape) n *= s;
    return n;
}

void write_section(Writer& w, std::span<const Blob> blobs) {
    w.u32(static_cast<uint32_t>(blobs.size()));
    for (const Blob& b : blobs) {
        if (b.payload.size() != b.elements() * dtype_size(b.dtype))
            throw DataError("blob payload size inconsistent with manifest: " + b.name);
        w.u32(static_cast<uint32_t>(b.name.size()));
        w.str(b.name);
        w.u8(static_cast<uint8_t>(b.dtype));
        w.u32(static_cast<uint32_t>(b.shape.size()));
        for (uint64_t s : b.shape) w.u64(s);
        w.u64(b.payload.size());
    }
    for (const Blob& b : blobs) w.bytes(b.payload);
}

std::vector<Blob> read_section(Reader& r) {
    const uint32_t count = r.u32();
    if (count > (1u << 20)) throw DataError("implausible blob count");
    std::vector<Blob> blobs(count);
    for (auto& b : blobs) {
        const uint32_t name_len = r.u32();
        if (name_len > 4096) throw DataError("implausible blob name length");
        b.name = r.str(name_len);
        b.dtype = static_cast<Dtype>(r.u8());
        dtype_size(b.dtype);  // validates the tag
        const uint32_t rank = r.u32();
        if (rank > 16) throw DataError("implausible blob rank");
        b.shape.resize(rank);
        for (auto& s : b.shape) s = r.u64();
        const uint64_t byte_len = r.u64();
        if (byte_len != b.elements() * dtype_size(b.dtype))
            throw DataError("blob byte length inconsistent with shape: " + b.name);
        b.payload.resize(byte_len);  // filled below
    }
    for (auto& b : blobs) {
        auto src = r.bytes(b.payload.size());
        std::memcpy(b.payload.data(), src.data(), src.size());
    }
    return blobs;
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open file: " + path.string());
    f.seekg(0, std::ios::end);
    const auto size = static_cast<size_t>(f.tellg());
    f.seekg(0);
    std::vector<uint8_t> bytes(size);
    if (size > 0) f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    if (!f) throw DataError("failed reading file: " + path.string());
    return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open file for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("failed writing file: " + path.string());
}

namespace {

constexpr uint32_t kFormatVersion = 1;

void append_checksum(Writer& w) {
    const uint32_t crc = crc32(w.data());
    w.u32(crc);
}

// strips and verifies the trailing crc32
std::span<const uint8_t> checked_body(std::span<const uint8_t> bytes, const char* what) {
    if (bytes.size() < 4) throw DataError(std::string(what) + ": truncated file");
    const auto body = bytes.subspan(0, bytes.size() - 4);
    Reader tail(bytes.subspan(bytes.size() - 4));
    const uint32_t stored = tail.u32();
    if (crc32(body) != stored) throw DataError(std::string(what) + ": checksum mismatch");
    return body;
}

}  // namespace

size_t feature_file_size(const Shape3& shape, uint64_t count) {
    return 4 + 4 + 8 + 4 * 3 + 1 + count * shape.total() * 4 + 4;
}

void write_features(const std::filesystem::path& path, std::span<const FeatureTensor> corpus) {
    if (corpus.empty()) throw DataError("write_features: empty corpus");
    const Shape3 shape = corpus[0].shape;
    Writer w;
    w.str("CUBF");
    w.u32(kFormatVersion);
    w.u64(corpus.size());
    w.u32(shape.h);
    w.u32(shape.w);
    w.u32(shape.d);
    w.u8(static_cast<uint8_t>(Dtype::F32));
    for (const auto& z : corpus) {
        if (z.shape != shape) throw ShapeError("write_features: corpus tensors disagree on shape");
        for (float v : z.values) w.f32(v);
    }
    append_checksum(w);
    write_file(path, w.data());
}

std::vector<FeatureTensor> read_features(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    Reader r(checked_body(bytes, "feature file"));
    if (r.str(4) != "CUBF") throw DataError("feature file: bad magic");
    if (r.u32() != kFormatVersion) throw DataError("feature file: unsupported version");
    const uint64_t count = r.u64();
    const uint32_t h = r.u32(), w = r.u32(), d = r.u32();
    if (r.u8() != static_cast<uint8_t>(Dtype::F32))
        throw DataError("feature file: unsupported dtype");
    const Shape3 shape(h, w, d);
    if (count == 0) throw DataError("feature file: empty corpus");
    if (r.remaining() != count * shape.total() * 4)
        throw DataError("feature file: payload size mismatch");
    std::vector<FeatureTensor> corpus;
    corpus.reserve(count);
    for (uint64_t n = 0; n < count; ++n) {
        std::vector<float> values(shape.total());
        for (auto& v : values) v = r.f32();
        corpus.emplace_back(shape, std::move(values));
    }
    return corpus;
}

size_t token_file_size(const Shape3& shape, uint32_t levels) {
    const size_t id_bytes = levels <= 256 ? 1 : 2;
    return 4 + 4 + 4 * 3 + 4 + 1 + shape.total() * id_bytes + 4;
}

void write_tokens(const std::filesystem::path& path, const TokenTensor& q) {
    Writer w;
    w.str("CUBQ");
    w.u32(kFormatVersion);
    w.u32(q.shape.h);
    w.u32(q.shape.w);
    w.u32(q.shape.d);
    w.u32(q.levels);
    const bool wide = q.levels > 256;
    w.u8(wide ? 1 : 0);
    for (uint16_t id : q.ids) {
        if (wide)
            w.u16(id);
        else
            w.u8(static_cast<uint8_t>(id));
    }
    append_checksum(w);
    write_file(path, w.data());
}

TokenTensor read_tokens(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    Reader r(checked_body(bytes, "token file"));
    if (r.str(4) != "CUBQ") throw DataError("token file: bad magic");
    if (r.u32() != kFormatVersion) throw DataError("token file: unsupported version");
    const uint32_t h = r.u32(), w = r.u32(), d = r.u32();
    const uint32_t levels = r.u32();
    const uint8_t wide = r.u8();
    if (wide > 1) throw DataError("token file: bad id width flag");
    const Shape3 shape(h, w, d);
    if (r.remaining() != shape.total() * (wide ? 2 : 1))
        throw DataError("token file: payload size mismatch");
    std::vector<uint16_t> ids(shape.total());
    for (auto& id : ids) id = wide ? r.u16() : r.u8();
    return TokenTensor(shape, levels, std::move(ids));
}

void save_quantizer_spec(const std::filesystem::path& path, const QuantizerSpec& spec) {
    nlohmann::json j;
    j["format"] = "cubemask-qspec";
    j["version"] = 1;
    j["levels"] = spec.levels;
    j["dims"] = spec.stats.dims;
    j["lo"] = spec.stats.lo;
    j["hi"] = spec.stats.hi;
    j["sample_count"] = spec.stats.sample_count;
    std::ofstream f(path);
    if (!f) throw DataError("cannot open file for writing: " + path.string());
    f << j.dump(2) << "\n";
    if (!f) throw DataError("failed writing file: " + path.string());
}

QuantizerSpec load_quantizer_spec(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open file: " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("quantizer spec: invalid JSON: " + std::string(e.what()));
    }
    try {
        if (j.at("format") != "cubemask-qspec") throw DataError("quantizer spec: bad format tag");
        CalibrationStats stats;
        stats.dims = j.at("dims").get<uint32_t>();
        stats.lo = j.at("lo").get<std::vector<double>>();
        stats.hi = j.at("hi").get<std::vector<double>>();
        stats.sample_count = j.at("sample_count").get<uint64_t>();
        return QuantizerSpec(j.at("levels").get<uint32_t>(), std::move(stats));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("quantizer spec: missing or invalid field: " + std::string(e.what()));
    }
}

}  // namespace cubemask::io
