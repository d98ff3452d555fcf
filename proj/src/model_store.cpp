#include "qnoise/model_store.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>

namespace qnoise {

namespace {

constexpr char kMagic[4] = {'Q', 'N', 'Z', '1'};

class Writer {
public:
    explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

    void u8(std::uint8_t v) { out_.push_back(v); }
    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) out_.push_back(std::uint8_t(v >> (8 * i)));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(std::uint8_t(v >> (8 * i)));
    }
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }

private:
    std::vector<std::uint8_t>& out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    std::size_t remaining() const { return in_.size() - pos_; }
    std::size_t position() const { return pos_; }

    void need(std::size_t n, const char* what) const {
        if (remaining() < n) {
            throw TruncatedError(std::string("truncated stream: ") + what + " needs " + std::to_string(n) +
                                 " bytes at offset " + std::to_string(pos_) + ", " + std::to_string(remaining()) +
                                 " left");
        }
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return in_[pos_++];
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = std::uint16_t(in_[pos_] | (in_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(in_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::int32_t i32(const char* what) { return static_cast<std::int32_t>(u32(what)); }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    std::span<const std::uint8_t> bytes(std::size_t n, const char* what) {
        need(n, what);
        auto s = in_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

private:
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::size_t v, const char* what) {
    if (v > std::numeric_limits<std::uint32_t>::max()) {
        throw std::length_error(std::string(what) + " does not fit in 32 bits");
    }
    return static_cast<std::uint32_t>(v);
}

std::size_t pq_payload_bytes(std::size_t k, std::size_t d, std::size_t blocks, bool int8) {
    const std::size_t centroid_bytes = int8 ? 8 + k * d : 4 * k * d;
    return 12 + centroid_bytes + (blocks * index_bits(k) + 7) / 8;
}

std::size_t scalar_payload_bytes(std::size_t nparams, std::size_t count, int bits) {
    return 6 + 8 * nparams + packed_code_bytes(count, bits);
}

[[noreturn]] void corrupt(std::size_t index, const std::string& why) {
    throw CorruptRecordError("corrupt record " + std::to_string(index) + ": " + why);
}

std::size_t expected_params(ChannelMode mode, std::size_t rows, std::size_t cols) {
    switch (mode) {
    case ChannelMode::per_tensor: return 1;
    case ChannelMode::per_row: return rows;
    case ChannelMode::per_col: return cols;
    }
    return 0;
}

} // namespace

CompressedTensor CompressedTensor::from_raw(const Matrix& w) {
    CompressedTensor t;
    t.scheme = SchemeTag::raw32;
    t.rows = w.rows();
    t.cols = w.cols();
    t.raw = w;
    return t;
}

CompressedTensor CompressedTensor::from_scalar(const ScalarQuantizedTensor& s) {
    CompressedTensor t;
    t.scheme = SchemeTag::int_n;
    t.rows = s.rows;
    t.cols = s.cols;
    t.scalar = s;
    return t;
}

CompressedTensor CompressedTensor::from_pq(const PqTensor& p) {
    CompressedTensor t;
    t.scheme = p.codebook.int8 ? SchemeTag::pq_int8 : SchemeTag::pq;
    t.rows = p.rows;
    t.cols = p.cols;
    t.pq = p;
    return t;
}

Matrix CompressedTensor::dequantize() const {
    switch (scheme) {
    case SchemeTag::raw32: return raw;
    case SchemeTag::int_n: return scalar.dequantize();
    case SchemeTag::pq:
    case SchemeTag::pq_int8: return pq.reconstruct();
    }
    throw std::logic_error("unknown scheme tag");
}

std::size_t CompressedTensor::payload_bytes() const {
    switch (scheme) {
    case SchemeTag::raw32: return 4 * rows * cols;
    case SchemeTag::int_n: return scalar_payload_bytes(scalar.params.size(), rows * cols, scalar.bits);
    case SchemeTag::pq:
    case SchemeTag::pq_int8:
        return pq_payload_bytes(pq.codebook.k, pq.codebook.d, pq.indices.entries.size(), scheme == SchemeTag::pq_int8);
    }
    throw std::logic_error("unknown scheme tag");
}

std::uint64_t CompressedTensor::pq_weight_bits() const {
    if (scheme != SchemeTag::pq && scheme != SchemeTag::pq_int8) return 0;
    return pq.codebook.storage_bits() + std::uint64_t(index_bits(pq.codebook.k)) * pq.indices.entries.size();
}

std::vector<std::uint8_t> pack_indices(std::span<const std::uint32_t> values, unsigned bits) {
    std::vector<std::uint8_t> out((values.size() * bits + 7) / 8, 0);
    std::size_t pos = 0;
    for (std::uint32_t v : values) {
        if (bits < 32 && (std::uint64_t(v) >> bits) != 0) throw std::out_of_range("pack_indices: value too wide");
        for (unsigned b = 0; b < bits; ++b, ++pos) {
            if ((v >> b) & 1u) out[pos / 8] = std::uint8_t(out[pos / 8] | (1u << (pos % 8)));
        }
    }
    return out;
}

std::vector<std::uint32_t> unpack_indices(std::span<const std::uint8_t> bytes, std::size_t count, unsigned bits) {
    if (bytes.size() * 8 < count * bits) throw TruncatedError("unpack_indices: not enough bytes");
    std::vector<std::uint32_t> out(count, 0);
    std::size_t pos = 0;
    for (auto& v : out) {
        for (unsigned b = 0; b < bits; ++b, ++pos) {
            if ((bytes[pos / 8] >> (pos % 8)) & 1u) v |= 1u << b;
        }
    }
    return out;
}

std::vector<std::uint8_t> serialize(const Model& model) {
    std::vector<std::uint8_t> out;
    Writer w(out);
    for (char c : kMagic) w.u8(std::uint8_t(c));
    w.u16(kFormatVersion);
    w.u32(checked_u32(model.tensors.size(), "tensor count"));
    for (const CompressedTensor& t : model.tensors) {
        w.u8(std::uint8_t(t.scheme));
        w.u32(checked_u32(t.rows, "rows"));
        w.u32(checked_u32(t.cols, "cols"));
        w.u32(checked_u32(t.payload_bytes(), "payload length"));
        const std::size_t start = out.size();
        switch (t.scheme) {
        case SchemeTag::raw32:
            require_same_shape(t.raw, Matrix(t.rows, t.cols), "serialize raw32");
            for (float v : t.raw.values()) w.f32(v);
            break;
        case SchemeTag::int_n:
            w.u8(std::uint8_t(t.scalar.bits));
            w.u8(std::uint8_t(t.scalar.mode));
            w.u32(checked_u32(t.scalar.params.size(), "parameter count"));
            for (const QuantParams& q : t.scalar.params) {
                w.f32(q.scale);
                w.i32(q.zero_point);
            }
            w.bytes(t.scalar.packed_codes);
            break;
        case SchemeTag::pq:
        case SchemeTag::pq_int8: {
            const Codebook& cb = t.pq.codebook;
            w.u32(checked_u32(t.pq.layout.block_rows, "block rows"));
            w.u32(checked_u32(t.pq.layout.block_cols, "block cols"));
            w.u32(checked_u32(cb.k, "K"));
            if (t.scheme == SchemeTag::pq_int8) {
                if (!cb.int8) throw std::invalid_argument("serialize: pq_int8 tensor without int8 centroids");
                w.f32(cb.int8->params.scale);
                w.i32(cb.int8->params.zero_point);
                w.bytes(cb.int8->codes);
            } else {
                for (float v : cb.centroids) w.f32(v);
            }
            w.bytes(pack_indices(t.pq.indices.entries, index_bits(cb.k)));
            break;
        }
        }
        if (out.size() - start != t.payload_bytes()) {
            throw std::logic_error("serialize: tensor payload does not match its declared length");
        }
    }
    return out;
}

Model deserialize(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    const std::size_t seen = std::min<std::size_t>(bytes.size(), 4);
    if (!std::equal(bytes.begin(), bytes.begin() + long(seen), std::begin(kMagic))) {
        throw BadMagicError("bad magic: not a QNZ1 stream");
    }
    r.bytes(4, "magic");
    const std::uint16_t version = r.u16("version");
    if (version != kFormatVersion) {
        throw VersionError("unsupported format version " + std::to_string(version) + " (expected " +
                           std::to_string(kFormatVersion) + ")");
    }
    const std::uint32_t count = r.u32("tensor count");
    Model model;
    for (std::uint32_t i = 0; i < count; ++i) {
        CompressedTensor t;
        const std::uint8_t tag = r.u8("scheme tag");
        if (tag > 3) corrupt(i, "unknown scheme tag " + std::to_string(tag));
        t.scheme = SchemeTag(tag);
        t.rows = r.u32("rows");
        t.cols = r.u32("cols");
        const std::size_t payload_len = r.u32("payload length");
        const std::span<const std::uint8_t> payload = r.bytes(payload_len, "payload");
        Reader p(payload);
        const std::size_t n = t.rows * t.cols;
        switch (t.scheme) {
        case SchemeTag::raw32: {
            if (payload_len != 4 * n) corrupt(i, "raw32 payload length does not match shape");
            std::vector<float> values(n);
            for (float& v : values) v = p.f32("raw value");
            try {
                t.raw = Matrix(t.rows, t.cols, std::move(values));
            } catch (const std::invalid_argument& e) {
                corrupt(i, e.what());
            }
            break;
        }
        case SchemeTag::int_n: {
            ScalarQuantizedTensor& s = t.scalar;
            s.rows = t.rows;
            s.cols = t.cols;
            s.bits = p.u8("bits");
            const std::uint8_t mode = p.u8("channel mode");
            if (s.bits != 4 && s.bits != 8) corrupt(i, "unsupported bit width " + std::to_string(s.bits));
            if (mode > 2) corrupt(i, "unknown channel mode");
            s.mode = ChannelMode(mode);
            const std::size_t np = p.u32("parameter count");
            if (np != expected_params(s.mode, t.rows, t.cols)) corrupt(i, "parameter count does not match mode");
            if (payload_len != scalar_payload_bytes(np, n, s.bits)) corrupt(i, "intN payload length mismatch");
            for (std::size_t k = 0; k < np; ++k) {
                QuantParams q;
                q.scale = p.f32("scale");
                q.zero_point = p.i32("zero point");
                q.bits = s.bits;
                if (!(std::isfinite(q.scale) && q.scale > 0.0f)) corrupt(i, "non-positive scale");
                s.params.push_back(q);
            }
            const auto codes = p.bytes(packed_code_bytes(n, s.bits), "codes");
            s.packed_codes.assign(codes.begin(), codes.end());
            break;
        }
        case SchemeTag::pq:
        case SchemeTag::pq_int8: {
            const bool int8 = t.scheme == SchemeTag::pq_int8;
            PqTensor& pq = t.pq;
            pq.rows = t.rows;
            pq.cols = t.cols;
            pq.layout.block_rows = p.u32("block rows");
            pq.layout.block_cols = p.u32("block cols");
            const std::size_t k = p.u32("K");
            if (k == 0) corrupt(i, "empty codebook");
            BlockGrid grid;
            try {
                grid = make_grid(t.rows, t.cols, pq.layout);
            } catch (const LayoutError& e) {
                corrupt(i, e.what());
            }
            const std::size_t d = grid.dim();
            if (payload_len != pq_payload_bytes(k, d, grid.blocks(), int8)) corrupt(i, "PQ payload length mismatch");
            Codebook& cb = pq.codebook;
            cb.k = k;
            cb.d = d;
            if (int8) {
                Int8Centroids c8;
                c8.params.scale = p.f32("centroid scale");
                c8.params.zero_point = p.i32("centroid zero point");
                c8.params.bits = 8;
                if (!(std::isfinite(c8.params.scale) && c8.params.scale > 0.0f)) corrupt(i, "non-positive scale");
                const auto codes = p.bytes(k * d, "centroid codes");
                c8.codes.assign(codes.begin(), codes.end());
                ScalarQuantizedTensor tmp{k, d, 8, ChannelMode::per_tensor, {c8.params}, c8.codes};
                const Matrix deq = tmp.dequantize();
                cb.centroids.assign(deq.values().begin(), deq.values().end());
                cb.int8 = std::move(c8);
            } else {
                cb.centroids.resize(k * d);
                for (float& v : cb.centroids) {
                    v = p.f32("centroid");
                    if (!std::isfinite(v)) corrupt(i, "non-finite centroid");
                }
            }
            const unsigned bits = index_bits(k);
            const auto packed = p.bytes((grid.blocks() * bits + 7) / 8, "indices");
            pq.indices.m = grid.m;
            pq.indices.q = grid.q;
            pq.indices.entries = unpack_indices(packed, grid.blocks(), bits);
            for (std::size_t b = 0; b < pq.indices.entries.size(); ++b) {
                if (pq.indices.entries[b] >= k) {
                    throw IndexRangeError("record " + std::to_string(i) + ": index " +
                                          std::to_string(pq.indices.entries[b]) + " at block " + std::to_string(b) +
                                          " is out of range for K = " + std::to_string(k));
                }
            }
            break;
        }
        }
        model.tensors.push_back(std::move(t));
    }
    if (r.remaining() != 0) {
        throw CorruptRecordError(std::to_string(r.remaining()) + " trailing bytes after the last record");
    }
    return model;
}

void write_model_file(const std::filesystem::path& path, const Model& model) {
    const std::vector<std::uint8_t> bytes = serialize(model);
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
        if (!f) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Model read_model_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

SizeReport size_report(const Model& model) {
    SizeReport rep;
    rep.total_bytes = kFileHeaderBytes;
    rep.baseline_bytes = kFileHeaderBytes;
    for (const CompressedTensor& t : model.tensors) {
        TensorSize s;
        s.scheme = t.scheme;
        s.payload_bytes = t.payload_bytes();
        s.bytes = kRecordHeaderBytes + s.payload_bytes;
        s.baseline_bytes = kRecordHeaderBytes + 4 * t.rows * t.cols;
        switch (t.scheme) {
        case SchemeTag::raw32: s.weight_bytes = s.payload_bytes; break;
        case SchemeTag::int_n: s.weight_bytes = t.scalar.code_bytes(); break;
        case SchemeTag::pq:
        case SchemeTag::pq_int8: s.weight_bytes = std::size_t((t.pq_weight_bits() + 7) / 8); break;
        }
        rep.total_bytes += s.bytes;
        rep.baseline_bytes += s.baseline_bytes;
        rep.tensors.push_back(s);
    }
    rep.ratio = double(rep.baseline_bytes) / double(rep.total_bytes);
    return rep;
}

double payload_ratio(const CompressedTensor& t) {
    const double baseline = 4.0 * double(t.rows * t.cols);
    switch (t.scheme) {
    case SchemeTag::raw32: return 1.0;
    case SchemeTag::int_n: return baseline / double(t.scalar.code_bytes());
    case SchemeTag::pq:
    case SchemeTag::pq_int8: return baseline * 8.0 / double(t.pq_weight_bits());
    }
    return 1.0;
}

Model raw_model(const Network& net) {
    Model m;
    for (const Param& p : net.params) {
        m.tensors.push_back(CompressedTensor::from_raw(p.weight));
        m.tensors.push_back(CompressedTensor::from_raw(p.bias));
    }
    return m;
}

Model scalar_model(const Network& net, int bits) {
    Model m;
    for (const Param& p : net.params) {
        m.tensors.push_back(CompressedTensor::from_scalar(quantize_tensor(p.weight, calibrate_minmax(p.weight, bits))));
        m.tensors.push_back(CompressedTensor::from_raw(p.bias));
    }
    return m;
}

Model pq_model(const CompressedNetwork& c) {
    Model m;
    for (std::size_t i = 0; i < c.net.params.size(); ++i) {
        const Param& p = c.net.params[i];
        m.tensors.push_back(i < c.pq.size() && c.pq[i] ? CompressedTensor::from_pq(*c.pq[i])
                                                        : CompressedTensor::from_raw(p.weight));
        m.tensors.push_back(CompressedTensor::from_raw(p.bias));
    }
    return m;
}

void load_weights(Network& net, const Model& model) {
    if (model.tensors.size() != 2 * net.params.size()) {
        throw DimensionError("load_weights: model has " + std::to_string(model.tensors.size()) + " tensors, network needs " +
                             std::to_string(2 * net.params.size()));
    }
    for (std::size_t i = 0; i < net.params.size(); ++i) {
        Matrix w = model.tensors[2 * i].dequantize();
        Matrix b = model.tensors[2 * i + 1].dequantize();
        require_same_shape(w, net.params[i].weight, "load_weights: weight");
        require_same_shape(b, net.params[i].bias, "load_weights: bias");
        net.params[i].weight = std::move(w);
        net.params[i].bias = std::move(b);
    }
}

} // namespace qnoise
