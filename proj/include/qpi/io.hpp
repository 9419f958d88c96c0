#ifndef QPI_IO_HPP
#define QPI_IO_HPP

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "qpi/error.hpp"
#include "qpi/forward_model.hpp"
#include "qpi/patch_extraction.hpp"

namespace qpi::io {

namespace fs = std::filesystem;

/// Records every file opened through this header, tagged with the stage that
/// was active. Tests use it to prove that a stage never touched a file it must not read.
class AccessAudit {
public:
    struct Access {
        std::string stage;
        std::string path;
    };

    static AccessAudit& instance() {
        static AccessAudit a;
        return a;
    }
    void set_stage(std::string stage) {
        std::lock_guard lock(m_);
        stage_ = std::move(stage);
    }
    void record_read(const fs::path& p) {
        std::lock_guard lock(m_);
        log_.push_back({stage_, fs::weakly_canonical(p).string()});
    }
    std::vector<std::string> reads() const {
        std::lock_guard lock(m_);
        std::vector<std::string> out;
        for (const auto& a : log_) out.push_back(a.path);
        return out;
    }
    std::vector<Access> accesses() const {
        std::lock_guard lock(m_);
        return log_;
    }
    void clear() {
        std::lock_guard lock(m_);
        log_.clear();
        stage_.clear();
    }

private:
    mutable std::mutex m_;
    std::string stage_;
    std::vector<Access> log_;
};

// --- little-endian primitives ------------------------------------------------

namespace detail {

template <typename T>
T byteswap_if_big(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    }
    return v;
}

}  // namespace detail

class Writer {
public:
    template <typename T>
    void put(T v) {
        v = detail::byteswap_if_big(v);
        const auto* p = reinterpret_cast<const char*>(&v);
        buf_.append(p, sizeof(T));
    }
    void raw(std::string_view s) { buf_.append(s); }
    void fixed_string(std::string_view s, std::size_t width) {
        if (s.size() > width)
            throw FormatError("string '" + std::string(s) + "' longer than " + std::to_string(width) + " bytes");
        buf_.append(s);
        buf_.append(width - s.size(), '\0');
    }
    void pad_to(std::size_t n) {
        if (buf_.size() > n) throw FormatError("header overflow");
        buf_.append(n - buf_.size(), '\0');
    }
    const std::string& bytes() const noexcept { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    Reader(std::string data, std::string origin) : data_(std::move(data)), origin_(std::move(origin)) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return detail::byteswap_if_big(v);
    }
    std::string raw(std::size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string fixed_string(std::size_t width) {
        std::string s = raw(width);
        s.resize(std::strlen(s.c_str()));
        return s;
    }
    void seek(std::size_t p) {
        if (p > data_.size()) throw FormatError(origin_ + ": truncated file");
        pos_ = p;
    }
    std::size_t remaining() const noexcept { return data_.size() - pos_; }
    const std::string& origin() const noexcept { return origin_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > data_.size()) throw FormatError(origin_ + ": truncated file");
    }
    std::string data_;
    std::string origin_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    AccessAudit::instance().record_read(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes via a temporary sibling and renames, so readers never see a partial file.
inline void write_file(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

inline void expect_magic(Reader& r, std::string_view magic) {
    const std::string got = r.raw(magic.size());
    if (got != magic) throw FormatError(r.origin() + ": bad magic (expected " + std::string(magic) + ")");
}

inline void put_raster(Writer& w, const RealGrid& g) {
    for (double v : g.storage()) w.put(static_cast<float>(v));
}

inline RealGrid get_raster(Reader& r, std::size_t rows, std::size_t cols) {
    if (r.remaining() < rows * cols * sizeof(float)) throw FormatError(r.origin() + ": truncated raster");
    RealGrid g(rows, cols);
    for (auto& v : g.storage()) v = static_cast<double>(r.get<float>());
    return g;
}

inline constexpr std::size_t kHeaderBytes = 64;
inline constexpr std::size_t kSubjectBytes = 16;

// --- QPI1 / QPH1 rasters -------------------------------------------------------
// 0 magic | 4 u32 rows | 8 u32 cols | 12 u32 wavelength_nm | 16 u32 pixel_pitch_nm
// 20 f32 carrier fx | 24 f32 carrier fy | 28 u8 wrapped (QPH1 only) | zeros to 64
// then rows*cols f32, row-major. Subject ids live in the sidecar manifests.

struct RasterHeader {
    std::uint32_t rows = 0, cols = 0;
    std::uint32_t wavelength_nm = 0;
    std::uint32_t pixel_pitch_nm = 0;
    float fx = 0.0f, fy = 0.0f;
    bool wrapped = false;
};

inline std::uint32_t to_nm(double um) {
    if (!(um >= 0.0) || um * 1000.0 > 4.0e9) throw FormatError("length out of range for the header");
    return static_cast<std::uint32_t>(std::llround(um * 1000.0));
}

inline void put_header(Writer& w, std::string_view magic, const RasterHeader& h) {
    w.raw(magic);
    w.put(h.rows);
    w.put(h.cols);
    w.put(h.wavelength_nm);
    w.put(h.pixel_pitch_nm);
    w.put(h.fx);
    w.put(h.fy);
    w.put(static_cast<std::uint8_t>(h.wrapped ? 1 : 0));
    w.pad_to(kHeaderBytes);
}

inline RasterHeader get_header(Reader& r, std::string_view magic) {
    expect_magic(r, magic);
    RasterHeader h;
    h.rows = r.get<std::uint32_t>();
    h.cols = r.get<std::uint32_t>();
    h.wavelength_nm = r.get<std::uint32_t>();
    h.pixel_pitch_nm = r.get<std::uint32_t>();
    h.fx = r.get<float>();
    h.fy = r.get<float>();
    const auto wrapped = r.get<std::uint8_t>();
    if (wrapped > 1) throw FormatError(r.origin() + ": wrapped flag must be 0 or 1");
    h.wrapped = wrapped == 1;
    if (h.rows == 0 || h.cols == 0) throw FormatError(r.origin() + ": empty raster");
    r.seek(kHeaderBytes);
    return h;
}

inline std::string encode_interferogram(const Interferogram& f) {
    Writer w;
    put_header(w, "QPI1",
               {static_cast<std::uint32_t>(f.pixels.rows()), static_cast<std::uint32_t>(f.pixels.cols()),
                to_nm(f.wavelength_um), to_nm(f.pixel_pitch_um), static_cast<float>(f.carrier.fx),
                static_cast<float>(f.carrier.fy), false});
    put_raster(w, f.pixels);
    return w.bytes();
}

inline Interferogram decode_interferogram(Reader r) {
    const RasterHeader h = get_header(r, "QPI1");
    Interferogram f;
    f.wavelength_um = h.wavelength_nm / 1000.0;
    f.pixel_pitch_um = h.pixel_pitch_nm / 1000.0;
    f.carrier = Carrier{h.fx, h.fy};
    f.pixels = get_raster(r, h.rows, h.cols);
    return f;
}

inline void write_interferogram(const fs::path& p, const Interferogram& f) { write_file(p, encode_interferogram(f)); }
inline Interferogram read_interferogram(const fs::path& p) {
    return decode_interferogram(Reader(read_file(p), p.string()));
}

/// `source` supplies the pitch and carrier fields when the map came from a frame.
inline std::string encode_phase(const PhaseMap& m, const Interferogram* source = nullptr) {
    Writer w;
    RasterHeader h{static_cast<std::uint32_t>(m.values_rad.rows()), static_cast<std::uint32_t>(m.values_rad.cols()),
                   to_nm(m.wavelength_um), 0, 0.0f, 0.0f, m.wrapped};
    if (source) {
        h.pixel_pitch_nm = to_nm(source->pixel_pitch_um);
        h.fx = static_cast<float>(source->carrier.fx);
        h.fy = static_cast<float>(source->carrier.fy);
    }
    put_header(w, "QPH1", h);
    put_raster(w, m.values_rad);
    return w.bytes();
}

inline PhaseMap decode_phase(Reader r) {
    const RasterHeader h = get_header(r, "QPH1");
    PhaseMap m;
    m.wrapped = h.wrapped;
    m.wavelength_um = h.wavelength_nm / 1000.0;
    m.values_rad = get_raster(r, h.rows, h.cols);
    return m;
}

inline void write_phase(const fs::path& p, const PhaseMap& m, const Interferogram* source = nullptr) {
    write_file(p, encode_phase(m, source));
}
inline PhaseMap read_phase(const fs::path& p) { return decode_phase(Reader(read_file(p), p.string())); }

// --- QPA1 patch --------------------------------------------------------------
// magic | u8 label | subject[16] | 3 x 60 x 60 f32 (red, green, blue)

inline std::string encode_patch(const patches::RbcPatch& p) {
    for (const auto& ch : p.channels)
        if (ch.rows() != patches::kPatchSide || ch.cols() != patches::kPatchSide)
            throw ShapeError("patch channels must be 60x60 before writing");
    Writer w;
    w.raw("QPA1");
    w.put(static_cast<std::uint8_t>(p.label));
    w.fixed_string(p.subject_id, kSubjectBytes);
    for (const auto& ch : p.channels) put_raster(w, ch);
    return w.bytes();
}

inline patches::RbcPatch decode_patch(Reader r) {
    expect_magic(r, "QPA1");
    patches::RbcPatch p;
    const auto label = r.get<std::uint8_t>();
    if (label > 2 && label != 255) throw FormatError(r.origin() + ": invalid class label " + std::to_string(label));
    p.label = static_cast<ClassLabel>(label);
    p.subject_id = r.fixed_string(kSubjectBytes);
    for (auto& ch : p.channels) ch = get_raster(r, patches::kPatchSide, patches::kPatchSide);
    p.normalized = true;
    p.bbox = Box{0, 0, static_cast<int>(patches::kPatchSide), static_cast<int>(patches::kPatchSide)};
    return p;
}

inline void write_patch(const fs::path& path, const patches::RbcPatch& p) { write_file(path, encode_patch(p)); }
inline patches::RbcPatch read_patch(const fs::path& path) {
    return decode_patch(Reader(read_file(path), path.string()));
}

// --- misc --------------------------------------------------------------------

/// FNV-1a of a byte string, hex encoded; used for stage provenance records.
inline std::string hash_bytes(std::string_view bytes) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
    return buf;
}

inline std::string hash_file(const fs::path& p) { return hash_bytes(read_file(p)); }

/// Shortest-safe round-trip text form of a double.
inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string read_text(const fs::path& p) { return read_file(p); }
inline void write_text(const fs::path& p, std::string_view s) { write_file(p, s); }

}  // namespace qpi::io

#endif  // QPI_IO_HPP
