#pragma once

// Binary P6 pixmaps for grid outputs, a raw float plane container for moving
// single modalities between commands, and the grid assembly the sample/condgen
// commands emit.

#include "modalflow/modality.hpp"

#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace modalflow {

// rgb plane in [0,1], 3 channels, written as a maxval-255 P6 pixmap
inline void write_ppm(const std::string& path, const Plane& rgb) {
    if (rgb.c != 3) throw ValidationError("write_ppm: need a 3-channel plane");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("write_ppm: cannot open " + path);
    os << "P6\n" << rgb.w << " " << rgb.h << "\n255\n";
    std::vector<unsigned char> row(size_t(rgb.w) * 3);
    for (int y = 0; y < rgb.h; y++) {
        for (int x = 0; x < rgb.w; x++)
            for (int ch = 0; ch < 3; ch++) {
                float v = std::clamp(rgb.at(y, x, ch), 0.f, 1.f);
                row[size_t(x) * 3 + size_t(ch)] = (unsigned char)std::lround(v * 255.f);
            }
        os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
    if (!os) throw FormatError("write_ppm: short write to " + path);
}

inline Plane read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("read_ppm: cannot open " + path);
    auto next_token = [&]() {
        std::string tok;
        while (is) {
            int ch = is.get();
            if (ch == '#') {
                while (is && is.get() != '\n') {
                }
                continue;
            }
            if (std::isspace(ch)) {
                if (!tok.empty()) break;
                continue;
            }
            if (ch == EOF) break;
            tok.push_back(char(ch));
        }
        return tok;
    };
    if (next_token() != "P6") throw FormatError("read_ppm: not a P6 file: " + path);
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(next_token());
        h = std::stoi(next_token());
        maxval = std::stoi(next_token());
    } catch (const std::exception&) {
        throw FormatError("read_ppm: bad header in " + path);
    }
    if (w < 1 || h < 1 || maxval != 255)
        throw FormatError("read_ppm: unsupported header in " + path);
    std::vector<unsigned char> bytes(size_t(w) * size_t(h) * 3);
    is.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
    if (is.gcount() != std::streamsize(bytes.size()))
        throw FormatError("read_ppm: truncated pixel data in " + path);
    Plane out(h, w, 3);
    for (size_t i = 0; i < bytes.size(); i++) out.data[i] = float(bytes[i]) / 255.f;
    return out;
}

inline constexpr char kPlaneMagic[4] = {'M', 'M', 'P', 'L'};

// raw float plane: header (magic, h, w, c) then row-major f32 data
inline void write_plane(const std::string& path, const Plane& plane) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("write_plane: cannot open " + path);
    os.write(kPlaneMagic, 4);
    write_pod<int32_t>(os, plane.h);
    write_pod<int32_t>(os, plane.w);
    write_pod<int32_t>(os, plane.c);
    os.write(reinterpret_cast<const char*>(plane.data.data()),
             std::streamsize(plane.data.size() * sizeof(float)));
    if (!os) throw FormatError("write_plane: short write to " + path);
}

inline Plane read_plane(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("read_plane: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kPlaneMagic, 4) != 0)
        throw FormatError("read_plane: bad magic in " + path);
    int32_t h = read_pod<int32_t>(is);
    int32_t w = read_pod<int32_t>(is);
    int32_t c = read_pod<int32_t>(is);
    if (h < 1 || w < 1 || c < 1 || int64_t(h) * w * c > (int64_t(1) << 30))
        throw FormatError("read_plane: implausible shape in " + path);
    Plane out(h, w, c);
    is.read(reinterpret_cast<char*>(out.data.data()),
            std::streamsize(out.data.size() * sizeof(float)));
    if (is.gcount() != std::streamsize(out.data.size() * sizeof(float)))
        throw FormatError("read_plane: truncated data in " + path);
    return out;
}

// Render one native plane as displayable rgb in [0,1]: run it through its
// codec (palette for seg, unit cube for normals, per-plane range for depth)
// and shift the [-1,1] channel space up; single channels are replicated.
inline Plane visualize(const Plane& native, const ModalitySpec& spec) {
    Plane enc = encode_to_channels(native, spec);
    Plane out(enc.h, enc.w, 3);
    for (int y = 0; y < enc.h; y++)
        for (int x = 0; x < enc.w; x++)
            for (int ch = 0; ch < 3; ch++) {
                float v = enc.at(y, x, enc.c == 1 ? 0 : ch);
                out.at(y, x, ch) = 0.5f * (v + 1.f);
            }
    return out;
}

// rows of equal-shape [0,1] rgb tiles -> one rgb plane with `pad` pixels of
// white separation (also around the outer border)
inline Plane assemble_grid(const std::vector<std::vector<Plane>>& rows, int pad = 2) {
    if (rows.empty() || rows[0].empty()) throw ValidationError("assemble_grid: empty grid");
    const int th = rows[0][0].h, tw = rows[0][0].w;
    const size_t cols = rows[0].size();
    for (const auto& row : rows) {
        if (row.size() != cols) throw ValidationError("assemble_grid: ragged rows");
        for (const auto& tile : row)
            if (tile.h != th || tile.w != tw || tile.c != 3)
                throw ValidationError("assemble_grid: tiles must be equal-shape rgb");
    }
    const int H = int(rows.size()) * (th + pad) + pad;
    const int W = int(cols) * (tw + pad) + pad;
    Plane out(H, W, 3, 1.f);
    for (size_t r = 0; r < rows.size(); r++)
        for (size_t col = 0; col < cols; col++) {
            const Plane& tile = rows[r][col];
            const int oy = pad + int(r) * (th + pad);
            const int ox = pad + int(col) * (tw + pad);
            for (int y = 0; y < th; y++)
                for (int x = 0; x < tw; x++)
                    for (int ch = 0; ch < 3; ch++)
                        out.at(oy + y, ox + x, ch) = tile.at(y, x, ch);
        }
    return out;
}

}  // namespace modalflow
