#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mopeft/common.hpp"
#include "mopeft/gating.hpp"
#include "mopeft/rng.hpp"
#include "mopeft/tensor.hpp"

namespace mopeft {

struct Sample {
    Tensor image;                // [H x W], values quantized to the 8-bit grid in [0, 1]
    std::vector<uint8_t> mask;   // row-major class indices
};

struct Dataset {
    int image = 0;
    int classes = 0;
    std::vector<Sample> train, val;
};

struct SyntheticTaskSpec {
    std::string domain = "stripes";  // blobs | stripes | rings | checker
    int image = 32;
    int classes = 4;
    double sigma = 0.05;
    int train_n = 32;
    int val_n = 8;
    uint64_t seed = 42;
};

namespace detail {

constexpr int kTile = 4;  // stripe thickness / checker tile edge

inline std::vector<uint8_t> synth_mask(const SyntheticTaskSpec& spec, const std::string& split,
                                       int idx, std::mt19937_64& rng) {
    int n = spec.image, c = spec.classes;
    std::vector<uint8_t> mask(static_cast<size_t>(n) * n);
    if (spec.domain == "stripes") {
        int phase = idx % (kTile * c);
        for (int r = 0; r < n; ++r) {
            auto cls = static_cast<uint8_t>(((r + phase) / kTile) % c);
            for (int col = 0; col < n; ++col) mask[static_cast<size_t>(r) * n + col] = cls;
        }
    } else if (spec.domain == "checker") {
        int off_r = idx % kTile, off_c = (idx / kTile) % kTile;
        for (int r = 0; r < n; ++r)
            for (int col = 0; col < n; ++col)
                mask[static_cast<size_t>(r) * n + col] =
                    static_cast<uint8_t>(((r + off_r) / kTile + (col + off_c) / kTile) % c);
    } else if (spec.domain == "rings") {
        std::uniform_real_distribution<double> jitter(-n / 8.0, n / 8.0);
        double cy = n / 2.0 + jitter(rng);
        double cx = n / 2.0 + jitter(rng);
        double width = std::max(2.0, n / (2.0 * c));
        for (int r = 0; r < n; ++r)
            for (int col = 0; col < n; ++col) {
                double d = std::hypot(r - cy, col - cx);
                mask[static_cast<size_t>(r) * n + col] =
                    static_cast<uint8_t>(static_cast<int>(d / width) % c);
            }
    } else if (spec.domain == "blobs") {
        // Voronoi cells around c distinct seed points; nearest seed wins,
        // lowest index on ties.
        std::uniform_int_distribution<int> coord(0, n - 1);
        std::vector<std::pair<int, int>> seeds;
        while (static_cast<int>(seeds.size()) < c) {
            std::pair<int, int> p{coord(rng), coord(rng)};
            if (std::find(seeds.begin(), seeds.end(), p) == seeds.end()) seeds.push_back(p);
        }
        for (int r = 0; r < n; ++r)
            for (int col = 0; col < n; ++col) {
                int best = 0;
                long best_d2 = -1;
                for (int s = 0; s < c; ++s) {
                    long dr = r - seeds[static_cast<size_t>(s)].first;
                    long dc = col - seeds[static_cast<size_t>(s)].second;
                    long d2 = dr * dr + dc * dc;
                    if (best_d2 < 0 || d2 < best_d2) {
                        best_d2 = d2;
                        best = s;
                    }
                }
                mask[static_cast<size_t>(r) * n + col] = static_cast<uint8_t>(best);
            }
    } else {
        throw std::invalid_argument("unknown synthetic domain '" + spec.domain + "'");
    }
    (void)split;
    return mask;
}

// Class identity sets the base intensity; Gaussian pixel noise on top; the
// result is snapped to the 8-bit grid so an on-disk round trip is exact.
inline Tensor synth_image(const std::vector<uint8_t>& mask, int n, int classes, double sigma,
                          std::mt19937_64& rng) {
    std::normal_distribution<double> noise(0.0, sigma);
    std::vector<double> px(mask.size());
    for (size_t i = 0; i < mask.size(); ++i) {
        double v = double(mask[i] + 1) / (classes + 1);
        if (sigma > 0.0) v += noise(rng);
        v = std::clamp(v, 0.0, 1.0);
        px[i] = std::round(v * 255.0) / 255.0;
    }
    return Tensor::from({n, n}, std::move(px));
}

}  // namespace detail

inline void validate_spec(const SyntheticTaskSpec& spec) {
    static const std::array<const char*, 4> domains{"blobs", "stripes", "rings", "checker"};
    if (std::find(domains.begin(), domains.end(), spec.domain) == domains.end())
        throw std::invalid_argument("unknown synthetic domain '" + spec.domain + "'");
    if (spec.classes < 2 || spec.classes > 255)
        throw std::invalid_argument("synthetic class count " + std::to_string(spec.classes) +
                                    " must be in [2, 255]");
    if (spec.image < detail::kTile)
        throw std::invalid_argument("synthetic image extent " + std::to_string(spec.image) +
                                    " must be >= " + std::to_string(detail::kTile));
    if (spec.sigma < 0.0)
        throw std::invalid_argument("noise sigma must be >= 0, got " +
                                    std::to_string(spec.sigma));
    if (spec.train_n < 0 || spec.val_n < 0)
        throw std::invalid_argument("sample counts must be >= 0");
    if (spec.classes > spec.image * spec.image)
        throw std::invalid_argument("more classes than pixels");
}

inline Dataset gen_synthetic(const SyntheticTaskSpec& spec) {
    validate_spec(spec);
    Dataset ds;
    ds.image = spec.image;
    ds.classes = spec.classes;
    auto gen_split = [&](const std::string& split, int count, std::vector<Sample>& out) {
        out.reserve(static_cast<size_t>(count));
        for (int i = 0; i < count; ++i) {
            auto rng = substream(spec.seed, "data/" + spec.domain + "/" + split,
                                 static_cast<uint64_t>(i));
            Sample s;
            s.mask = detail::synth_mask(spec, split, i, rng);
            s.image = detail::synth_image(s.mask, spec.image, spec.classes, spec.sigma, rng);
            out.push_back(std::move(s));
        }
    };
    gen_split("train", spec.train_n, ds.train);
    gen_split("val", spec.val_n, ds.val);
    return ds;
}

// ---- PGM P5 ---------------------------------------------------------------------

inline std::string encode_pgm(const std::vector<uint8_t>& pixels, int w, int h) {
    if (static_cast<size_t>(w) * h != pixels.size())
        throw std::invalid_argument("encode_pgm: " + std::to_string(pixels.size()) +
                                    " pixels for " + std::to_string(w) + "x" +
                                    std::to_string(h));
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
    return out;
}

inline void write_pgm(const std::filesystem::path& path, const std::vector<uint8_t>& pixels,
                      int w, int h) {
    atomic_write_file(path, encode_pgm(pixels, w, h));
}

struct PgmImage {
    int w = 0, h = 0;
    std::vector<uint8_t> pixels;
};

inline PgmImage decode_pgm(const std::string& bytes, const std::string& what) {
    size_t pos = 0;
    auto token = [&]() -> std::string {
        while (pos < bytes.size()) {
            if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else {
                break;
            }
        }
        size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) throw FormatError(what + ": truncated PGM header");
        return bytes.substr(start, pos - start);
    };
    auto header_int = [&](const char* field) {
        std::string t = token();
        try {
            size_t used = 0;
            int v = std::stoi(t, &used);
            if (used != t.size() || v < 1) throw std::invalid_argument(t);
            return v;
        } catch (const std::exception&) {
            throw FormatError(what + ": bad PGM " + field + " '" + t + "'");
        }
    };
    if (token() != "P5") throw FormatError(what + ": not a binary PGM (magic != P5)");
    PgmImage img;
    img.w = header_int("width");
    img.h = header_int("height");
    int maxval = header_int("maxval");
    if (maxval != 255)
        throw FormatError(what + ": unsupported PGM maxval " + std::to_string(maxval) +
                          " (only 255)");
    ++pos;  // single whitespace byte after maxval
    size_t need = static_cast<size_t>(img.w) * img.h;
    if (bytes.size() - pos < need)
        throw FormatError(what + ": PGM payload truncated (" +
                          std::to_string(bytes.size() - pos) + " of " + std::to_string(need) +
                          " bytes)");
    if (bytes.size() - pos > need)
        throw FormatError(what + ": trailing bytes after PGM payload");
    img.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.end());
    return img;
}

inline PgmImage read_pgm(const std::filesystem::path& path) {
    return decode_pgm(read_file(path), path.string());
}

// ---- dataset directory format ---------------------------------------------------
// <dir>/manifest.txt lists `# classes = C`, `# image = N` headers followed by
// one `split index image-file mask-file` row per sample; PGMs live under
// train/ and val/. Images quantize to bytes, masks store raw class indices.

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::string manifest = "# mopeft dataset\n# classes = " + std::to_string(ds.classes) +
                           "\n# image = " + std::to_string(ds.image) + "\n";
    auto save_split = [&](const char* split, const std::vector<Sample>& samples) {
        for (size_t i = 0; i < samples.size(); ++i) {
            char name[64];
            std::snprintf(name, sizeof(name), "%s/image_%05zu.pgm", split, i);
            std::string image_rel = name;
            std::snprintf(name, sizeof(name), "%s/mask_%05zu.pgm", split, i);
            std::string mask_rel = name;
            const Sample& s = samples[i];
            std::vector<uint8_t> px(s.image.numel());
            for (size_t j = 0; j < px.size(); ++j)
                px[j] = static_cast<uint8_t>(std::lround(s.image.data()[j] * 255.0));
            write_pgm(dir / image_rel, px, ds.image, ds.image);
            write_pgm(dir / mask_rel, s.mask, ds.image, ds.image);
            manifest += std::string(split) + " " + std::to_string(i) + " " + image_rel + " " +
                        mask_rel + "\n";
        }
    };
    save_split("train", ds.train);
    save_split("val", ds.val);
    atomic_write_file(dir / "manifest.txt", manifest);
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    std::filesystem::path manifest_path = dir / "manifest.txt";
    std::string text = read_file(manifest_path);
    std::string what = manifest_path.string();
    Dataset ds;
    int line_no = 0;
    size_t pos = 0;
    std::vector<size_t> counts{0, 0};  // train, val rows seen
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        ++line_no;
        auto fail = [&](const std::string& msg) {
            throw FormatError(what + ":" + std::to_string(line_no) + ": " + msg);
        };
        if (line.empty()) continue;
        if (line[0] == '#') {
            auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            std::string key = line.substr(1, eq - 1);
            std::string val = line.substr(eq + 1);
            auto strip = [](std::string s) {
                size_t b = s.find_first_not_of(" \t");
                size_t e = s.find_last_not_of(" \t");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            key = strip(key);
            val = strip(val);
            try {
                if (key == "classes") ds.classes = std::stoi(val);
                else if (key == "image") ds.image = std::stoi(val);
            } catch (const std::exception&) {
                fail("bad header value '" + val + "' for " + key);
            }
            continue;
        }
        std::string split, image_rel, mask_rel;
        size_t index = 0;
        {
            std::vector<std::string> fields;
            size_t f = 0;
            while (f < line.size()) {
                size_t sp = line.find(' ', f);
                if (sp == std::string::npos) sp = line.size();
                if (sp > f) fields.push_back(line.substr(f, sp - f));
                f = sp + 1;
            }
            if (fields.size() != 4) fail("expected 'split index image mask', got '" + line + "'");
            split = fields[0];
            try {
                index = std::stoul(fields[1]);
            } catch (const std::exception&) {
                fail("bad sample index '" + fields[1] + "'");
            }
            image_rel = fields[2];
            mask_rel = fields[3];
        }
        if (split != "train" && split != "val") fail("unknown split '" + split + "'");
        if (ds.classes < 2 || ds.image < 1) fail("sample row before classes/image headers");
        size_t& count = counts[split == "train" ? 0 : 1];
        if (index != count)
            fail("sample index " + std::to_string(index) + " out of order (expected " +
                 std::to_string(count) + ")");
        ++count;

        PgmImage img = read_pgm(dir / image_rel);
        PgmImage msk = read_pgm(dir / mask_rel);
        if (img.w != ds.image || img.h != ds.image)
            fail(image_rel + ": extent " + std::to_string(img.w) + "x" + std::to_string(img.h) +
                 " does not match manifest image = " + std::to_string(ds.image));
        if (msk.w != img.w || msk.h != img.h)
            fail(mask_rel + ": mask extent does not match its image");
        for (uint8_t v : msk.pixels)
            if (v >= ds.classes)
                fail(mask_rel + ": class value " + std::to_string(int(v)) + " >= classes " +
                     std::to_string(ds.classes));
        Sample s;
        std::vector<double> px(img.pixels.size());
        for (size_t j = 0; j < px.size(); ++j) px[j] = img.pixels[j] / 255.0;
        s.image = Tensor::from({ds.image, ds.image}, std::move(px));
        s.mask = std::move(msk.pixels);
        (split == "train" ? ds.train : ds.val).push_back(std::move(s));
    }
    if (ds.classes < 2 || ds.image < 1)
        throw FormatError(what + ": missing classes/image headers");
    return ds;
}

// ---- CSV schemas ------------------------------------------------------------------

struct MetricsRow {
    int epoch = 0;
    std::string split;  // "train" | "val"
    double loss = 0.0;
    double miou = 0.0;
    std::array<double, 3> gate_mean{};  // lora, prefix, adapter
    bool gated = false;
};

inline constexpr const char* kMetricsHeader =
    "epoch,split,loss,miou,gate_lora_mean,gate_prefix_mean,gate_adapter_mean";

inline void write_metrics_csv(const std::vector<MetricsRow>& rows,
                              const std::filesystem::path& path) {
    std::string out = std::string(kMetricsHeader) + "\n";
    for (const MetricsRow& r : rows) {
        out += std::to_string(r.epoch) + "," + r.split + "," + format_double(r.loss, 6) + "," +
               format_double(r.miou, 6);
        for (int m = 0; m < 3; ++m)
            out += r.gated ? "," + format_double(r.gate_mean[static_cast<size_t>(m)], 6) : ",";
        out += "\n";
    }
    atomic_write_file(path, out);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    size_t pos = 0;
    while (true) {
        size_t comma = line.find(',', pos);
        if (comma == std::string::npos) {
            fields.push_back(line.substr(pos));
            return fields;
        }
        fields.push_back(line.substr(pos, comma - pos));
        pos = comma + 1;
    }
}

inline double csv_double(const std::string& field, const std::string& what, int line_no) {
    try {
        size_t used = 0;
        double v = std::stod(field, &used);
        if (used != field.size()) throw std::invalid_argument(field);
        return v;
    } catch (const std::exception&) {
        throw FormatError(what + ":" + std::to_string(line_no) + ": bad number '" + field + "'");
    }
}

inline std::vector<std::string> csv_lines(const std::string& text) {
    std::vector<std::string> lines;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        if (eol > pos) lines.push_back(text.substr(pos, eol - pos));
        pos = eol + 1;
    }
    return lines;
}

}  // namespace detail

inline std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
    std::string what = path.string();
    std::vector<std::string> lines = detail::csv_lines(read_file(path));
    if (lines.empty() || lines[0] != kMetricsHeader)
        throw FormatError(what + ": missing metrics header");
    std::vector<MetricsRow> rows;
    for (size_t i = 1; i < lines.size(); ++i) {
        int line_no = static_cast<int>(i) + 1;
        std::vector<std::string> f = detail::split_csv_line(lines[i]);
        if (f.size() != 7)
            throw FormatError(what + ":" + std::to_string(line_no) + ": expected 7 fields, got " +
                              std::to_string(f.size()));
        MetricsRow r;
        r.epoch = static_cast<int>(detail::csv_double(f[0], what, line_no));
        r.split = f[1];
        r.loss = detail::csv_double(f[2], what, line_no);
        r.miou = detail::csv_double(f[3], what, line_no);
        r.gated = !f[4].empty();
        if (r.gated)
            for (int m = 0; m < 3; ++m)
                r.gate_mean[static_cast<size_t>(m)] =
                    detail::csv_double(f[static_cast<size_t>(4 + m)], what, line_no);
        rows.push_back(std::move(r));
    }
    return rows;
}

inline constexpr const char* kGateHeader = "layer,method,count,total_samples";

// One row per (layer, method) plus an ALL summary row per method; zero counts
// are written, never omitted.
inline void write_gate_csv(const SelectionCounts& counts, const std::filesystem::path& path) {
    const PeftMethod methods[] = {PeftMethod::kLora, PeftMethod::kPrefix, PeftMethod::kAdapter};
    std::string out = std::string(kGateHeader) + "\n";
    for (int layer = 0; layer < counts.n_layers; ++layer)
        for (PeftMethod m : methods)
            out += std::to_string(layer) + "," + method_name(m) + "," +
                   std::to_string(
                       counts.per_layer[static_cast<size_t>(layer)][static_cast<size_t>(m)]) +
                   "," + std::to_string(counts.total_samples) + "\n";
    for (PeftMethod m : methods)
        out += std::string("ALL,") + method_name(m) + "," +
               std::to_string(counts.overall[static_cast<size_t>(m)]) + "," +
               std::to_string(counts.total_samples) + "\n";
    atomic_write_file(path, out);
}

inline SelectionCounts read_gate_csv(const std::filesystem::path& path) {
    std::string what = path.string();
    std::vector<std::string> lines = detail::csv_lines(read_file(path));
    if (lines.empty() || lines[0] != kGateHeader)
        throw FormatError(what + ": missing gate header");
    SelectionCounts counts;
    bool have_total = false;
    for (size_t i = 1; i < lines.size(); ++i) {
        int line_no = static_cast<int>(i) + 1;
        std::vector<std::string> f = detail::split_csv_line(lines[i]);
        if (f.size() != 4)
            throw FormatError(what + ":" + std::to_string(line_no) + ": expected 4 fields, got " +
                              std::to_string(f.size()));
        PeftMethod m = method_from_name(f[1]);
        auto count = static_cast<size_t>(detail::csv_double(f[2], what, line_no));
        auto total = static_cast<size_t>(detail::csv_double(f[3], what, line_no));
        if (have_total && total != counts.total_samples)
            throw FormatError(what + ":" + std::to_string(line_no) +
                              ": inconsistent total_samples");
        counts.total_samples = total;
        have_total = true;
        if (f[0] == "ALL") {
            counts.overall[static_cast<size_t>(m)] = count;
        } else {
            auto layer = static_cast<int>(detail::csv_double(f[0], what, line_no));
            if (layer < 0)
                throw FormatError(what + ":" + std::to_string(line_no) + ": negative layer");
            if (layer >= counts.n_layers) {
                counts.per_layer.resize(static_cast<size_t>(layer) + 1, {0, 0, 0});
                counts.n_layers = layer + 1;
            }
            counts.per_layer[static_cast<size_t>(layer)][static_cast<size_t>(m)] = count;
        }
    }
    size_t layer_sum = 0, overall_sum = 0;
    for (const auto& row : counts.per_layer)
        for (size_t c : row) layer_sum += c;
    for (size_t c : counts.overall) overall_sum += c;
    if (layer_sum != overall_sum)
        throw FormatError(what + ": ALL rows disagree with per-layer rows (" +
                          std::to_string(overall_sum) + " vs " + std::to_string(layer_sum) + ")");
    return counts;
}

}  // namespace mopeft
