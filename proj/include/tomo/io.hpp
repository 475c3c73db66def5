#pragma once

// TOMO1 binary container.
//
// Layout, byte-exact:
//   6 bytes   magic "TOMO1\n"
//   1 line    UTF-8 header, newline-terminated:
//             kind=<image|sinogram|tensor> dims=<a>x<b>[x<c>x<d>] dtype=<f32|f64>
//             meta=<key:val,...>
//   payload   raw little-endian values, row-major
//
// Image payload is height rows of width entries (dims=<width>x<height>,
// meta carries pixel_size). Sinogram payload is view-major
// (dims=<n_views>x<n_bins>, meta carries domain). Tensor dims are written
// outermost first. meta is omitted from parsing concerns by forbidding
// spaces, commas, colons and newlines inside keys and values; keys are
// written in sorted order. An empty meta is written as meta=-.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tomo/core.hpp"

namespace tomo {

static_assert(std::endian::native == std::endian::little,
              "TOMO1 writer assumes a little-endian host");

// Shortest-exact is not needed; 17 significant digits round-trip any double.
inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline double parse_double(const std::string& s) {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::runtime_error("bad numeric field: " + s);
    return v;
}

struct TomoBlob {
    std::string kind;
    std::vector<std::size_t> dims;
    std::string dtype = "f64";
    std::map<std::string, std::string> meta;
    std::vector<double> data;

    std::size_t element_count() const {
        std::size_t n = 1;
        for (std::size_t d : dims) n *= d;
        return n;
    }
};

namespace detail {
inline void check_meta_token(const std::string& s) {
    if (s.empty()) throw std::runtime_error("TOMO1: empty meta token");
    for (char c : s)
        if (c == ' ' || c == ',' || c == ':' || c == '\n')
            throw std::runtime_error("TOMO1: illegal character in meta token: " + s);
}
}  // namespace detail

inline void write_blob(const std::string& path, const TomoBlob& blob) {
    if (blob.kind.empty() || blob.dims.empty())
        throw std::runtime_error("TOMO1: blob needs kind and dims");
    if (blob.dtype != "f32" && blob.dtype != "f64")
        throw std::runtime_error("TOMO1: dtype must be f32 or f64");
    if (blob.data.size() != blob.element_count())
        throw std::runtime_error("TOMO1: data length does not match dims");

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("TOMO1: cannot open for writing: " + path);
    out << "TOMO1\n";
    out << "kind=" << blob.kind << " dims=";
    for (std::size_t i = 0; i < blob.dims.size(); ++i)
        out << (i ? "x" : "") << blob.dims[i];
    out << " dtype=" << blob.dtype << " meta=";
    if (blob.meta.empty()) {
        out << "-";
    } else {
        bool first = true;
        for (const auto& [k, v] : blob.meta) {
            detail::check_meta_token(k);
            detail::check_meta_token(v);
            out << (first ? "" : ",") << k << ":" << v;
            first = false;
        }
    }
    out << "\n";
    if (blob.dtype == "f64") {
        out.write(reinterpret_cast<const char*>(blob.data.data()),
                  static_cast<std::streamsize>(blob.data.size() * sizeof(double)));
    } else {
        std::vector<float> f(blob.data.begin(), blob.data.end());
        out.write(reinterpret_cast<const char*>(f.data()),
                  static_cast<std::streamsize>(f.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("TOMO1: write failed: " + path);
}

inline TomoBlob read_blob(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("TOMO1: cannot open: " + path);
    std::string magic(6, '\0');
    in.read(magic.data(), 6);
    if (!in || magic != "TOMO1\n") throw std::runtime_error("TOMO1: bad magic in " + path);
    std::string header;
    if (!std::getline(in, header)) throw std::runtime_error("TOMO1: missing header in " + path);

    TomoBlob blob;
    std::istringstream hs(header);
    std::string field;
    while (hs >> field) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) throw std::runtime_error("TOMO1: bad header field: " + field);
        const std::string key = field.substr(0, eq);
        const std::string val = field.substr(eq + 1);
        if (key == "kind") {
            blob.kind = val;
        } else if (key == "dims") {
            std::size_t pos = 0;
            while (pos < val.size()) {
                auto x = val.find('x', pos);
                if (x == std::string::npos) x = val.size();
                blob.dims.push_back(std::stoull(val.substr(pos, x - pos)));
                pos = x + 1;
            }
        } else if (key == "dtype") {
            blob.dtype = val;
        } else if (key == "meta") {
            if (val != "-") {
                std::size_t pos = 0;
                while (pos < val.size()) {
                    auto comma = val.find(',', pos);
                    if (comma == std::string::npos) comma = val.size();
                    const std::string kv = val.substr(pos, comma - pos);
                    const auto colon = kv.find(':');
                    if (colon == std::string::npos)
                        throw std::runtime_error("TOMO1: bad meta entry: " + kv);
                    blob.meta[kv.substr(0, colon)] = kv.substr(colon + 1);
                    pos = comma + 1;
                }
            }
        } else {
            throw std::runtime_error("TOMO1: unknown header key: " + key);
        }
    }
    if (blob.kind.empty() || blob.dims.empty())
        throw std::runtime_error("TOMO1: incomplete header in " + path);

    const std::size_t n = blob.element_count();
    blob.data.resize(n);
    if (blob.dtype == "f64") {
        in.read(reinterpret_cast<char*>(blob.data.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
    } else if (blob.dtype == "f32") {
        std::vector<float> f(n);
        in.read(reinterpret_cast<char*>(f.data()),
                static_cast<std::streamsize>(n * sizeof(float)));
        for (std::size_t i = 0; i < n; ++i) blob.data[i] = f[i];
    } else {
        throw std::runtime_error("TOMO1: unknown dtype: " + blob.dtype);
    }
    if (!in) throw std::runtime_error("TOMO1: truncated payload in " + path);
    return blob;
}

inline void save_image(const std::string& path, const Image& img,
                       const std::string& dtype = "f64") {
    TomoBlob blob;
    blob.kind = "image";
    blob.dims = {static_cast<std::size_t>(img.width), static_cast<std::size_t>(img.height)};
    blob.dtype = dtype;
    blob.meta["pixel_size"] = format_double(img.pixel_size);
    blob.data = img.values;
    write_blob(path, blob);
}

inline Image load_image(const std::string& path) {
    TomoBlob blob = read_blob(path);
    if (blob.kind != "image") throw std::runtime_error("expected kind=image in " + path);
    if (blob.dims.size() != 2) throw std::runtime_error("image needs 2 dims in " + path);
    const auto it = blob.meta.find("pixel_size");
    if (it == blob.meta.end()) throw std::runtime_error("image missing pixel_size in " + path);
    Image img(static_cast<int>(blob.dims[0]), static_cast<int>(blob.dims[1]),
              parse_double(it->second));
    img.values = std::move(blob.data);
    return img;
}

inline void save_sinogram(const std::string& path, const Sinogram& sino,
                          const std::string& dtype = "f64") {
    TomoBlob blob;
    blob.kind = "sinogram";
    blob.dims = {static_cast<std::size_t>(sino.n_views), static_cast<std::size_t>(sino.n_bins)};
    blob.dtype = dtype;
    blob.meta["domain"] = to_string(sino.domain);
    blob.data = sino.values;
    write_blob(path, blob);
}

inline Sinogram load_sinogram(const std::string& path) {
    TomoBlob blob = read_blob(path);
    if (blob.kind != "sinogram") throw std::runtime_error("expected kind=sinogram in " + path);
    if (blob.dims.size() != 2) throw std::runtime_error("sinogram needs 2 dims in " + path);
    const auto it = blob.meta.find("domain");
    if (it == blob.meta.end()) throw std::runtime_error("sinogram missing domain in " + path);
    Sinogram sino(static_cast<int>(blob.dims[0]), static_cast<int>(blob.dims[1]),
                  sinogram_domain_from_string(it->second));
    sino.values = std::move(blob.data);
    return sino;
}

inline std::uint64_t fnv1a_bytes(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

// Content hash used by dataset manifests (FNV-1a over the raw bytes).
inline std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot hash missing file: " + path);
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 14];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        const std::streamsize got = in.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ull;
        }
        if (!in) break;
    }
    return h;
}

inline std::string fnv1a_file_hex(const std::string& path) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a_file(path)));
    return buf;
}

}  // namespace tomo
