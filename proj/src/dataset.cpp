#include "foba/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "foba/errors.hpp"
#include "foba/png_io.hpp"
#include "foba/rng.hpp"

namespace fs = std::filesystem;

namespace foba {

// ---- palette ---------------------------------------------------------------

Palette::Palette(std::vector<PaletteEntry> entries) : entries_(std::move(entries)) {
    for (size_t i = 0; i < entries_.size(); ++i)
        for (size_t j = i + 1; j < entries_.size(); ++j) {
            if (entries_[i].id == entries_[j].id)
                throw ConfigError("palette repeats id " + std::to_string(entries_[i].id));
            if (entries_[i].rgb == entries_[j].rgb)
                throw ConfigError("palette repeats a color; ids " +
                                  std::to_string(entries_[i].id) + " and " +
                                  std::to_string(entries_[j].id));
        }
}

int Palette::max_id() const {
    int m = -1;
    for (const auto& e : entries_) m = std::max(m, e.id);
    return m;
}

int Palette::id_for_color(uint8_t r, uint8_t g, uint8_t b) const {
    for (const auto& e : entries_)
        if (e.rgb[0] == r && e.rgb[1] == g && e.rgb[2] == b) return e.id;
    return -1;
}

std::array<uint8_t, 3> Palette::color_for_id(int id) const {
    for (const auto& e : entries_)
        if (e.id == id) return e.rgb;
    throw LabelOutOfRange("no palette entry for class " + std::to_string(id));
}

Palette default_palette(int n_classes) {
    static const std::array<std::pair<std::array<uint8_t, 3>, const char*>, 10> table = {{
        {{230, 25, 75}, "red"},
        {{60, 180, 75}, "green"},
        {{0, 130, 200}, "blue"},
        {{255, 225, 25}, "yellow"},
        {{145, 30, 180}, "purple"},
        {{70, 240, 240}, "cyan"},
        {{245, 130, 48}, "orange"},
        {{240, 50, 230}, "pink"},
        {{128, 128, 0}, "olive"},
        {{0, 128, 128}, "teal"},
    }};
    std::vector<PaletteEntry> entries;
    entries.push_back({0, {0, 0, 0}, "none"});
    for (int c = 1; c <= n_classes; ++c) {
        PaletteEntry e;
        e.id = c;
        if (c <= static_cast<int>(table.size())) {
            e.rgb = table[static_cast<size_t>(c - 1)].first;
            e.name = table[static_cast<size_t>(c - 1)].second;
        } else {
            // Procedural fallback: distinct odd strides through the cube.
            e.rgb = {static_cast<uint8_t>((c * 73 + 11) % 255 + 1),
                     static_cast<uint8_t>((c * 151 + 29) % 256),
                     static_cast<uint8_t>((c * 199 + 83) % 256)};
            e.name = "class" + std::to_string(c);
        }
        entries.push_back(e);
    }
    return Palette(std::move(entries));
}

Palette load_palette(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingFile("cannot open " + path);
    std::vector<PaletteEntry> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream is(line);
        PaletteEntry e;
        int r, g, b;
        if (!(is >> e.id >> r >> g >> b >> e.name) || r < 0 || r > 255 || g < 0 || g > 255 ||
            b < 0 || b > 255)
            throw IoError(path + ":" + std::to_string(lineno) + ": malformed palette line");
        e.rgb = {static_cast<uint8_t>(r), static_cast<uint8_t>(g), static_cast<uint8_t>(b)};
        entries.push_back(e);
    }
    if (entries.empty()) throw IoError(path + ": empty palette");
    return Palette(std::move(entries));
}

void save_palette(const std::string& path, const Palette& palette) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot create " + path);
    for (const auto& e : palette.entries())
        out << e.id << ' ' << int(e.rgb[0]) << ' ' << int(e.rgb[1]) << ' ' << int(e.rgb[2])
            << ' ' << e.name << '\n';
    if (!out) throw IoError("failed writing " + path);
}

// ---- synthetic scenes ------------------------------------------------------

void SynthConfig::validate() const {
    if (n_samples < 0) throw ConfigError("n_samples must be nonnegative");
    if (image_size <= 0 || image_size % 32)
        throw ConfigError("image_size must be a positive multiple of 32");
    if (n_classes < 2) throw ConfigError("n_classes must be at least 2");
    if (min_shapes < 0 || max_shapes < min_shapes)
        throw ConfigError("shape count range is inverted");
    if (change_density < 0.0 || change_density > 1.0)
        throw ConfigError("change_density must be in [0,1]");
    if (noise_amplitude < 0.0) throw ConfigError("noise_amplitude must be nonnegative");
}

namespace {

enum class ShapeKind { ellipse, box, triangle };

struct Shape {
    ShapeKind kind;
    int class_t1 = 0;  // 0 = absent at that date
    int class_t2 = 0;
    double cx = 0, cy = 0, rx = 0, ry = 0;       // ellipse / box extents
    std::array<double, 6> tri = {};              // triangle vertices x0,y0,...

    bool covers(int x, int y) const {
        const double px = x + 0.5, py = y + 0.5;
        switch (kind) {
            case ShapeKind::ellipse: {
                const double dx = (px - cx) / rx, dy = (py - cy) / ry;
                return dx * dx + dy * dy <= 1.0;
            }
            case ShapeKind::box:
                return std::abs(px - cx) <= rx && std::abs(py - cy) <= ry;
            case ShapeKind::triangle: {
                auto side = [&](int a, int b) {
                    const double ax = tri[static_cast<size_t>(2 * a)],
                                 ay = tri[static_cast<size_t>(2 * a + 1)];
                    const double bx = tri[static_cast<size_t>(2 * b)],
                                 by = tri[static_cast<size_t>(2 * b + 1)];
                    return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                };
                const double s0 = side(0, 1), s1 = side(1, 2), s2 = side(2, 0);
                const bool has_neg = s0 < 0 || s1 < 0 || s2 < 0;
                const bool has_pos = s0 > 0 || s1 > 0 || s2 > 0;
                return !(has_neg && has_pos);
            }
        }
        return false;
    }
};

// Per-pixel topmost class among the shapes present at one date (0 = none).
// Painter's order: later shapes overwrite earlier ones.
void paint_visibility(const std::vector<Shape>& shapes, int date, Tensor<int32_t>& vis) {
    const int s = vis.dim(0);
    vis.fill(0);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
            for (const Shape& sh : shapes) {
                const int cls = date == 1 ? sh.class_t1 : sh.class_t2;
                if (cls != 0 && sh.covers(x, y)) vis[y * s + x] = cls;
            }
}

uint8_t quantize(double v) {
    const double c = std::min(1.0, std::max(0.0, v));
    return static_cast<uint8_t>(std::lround(c * 255.0));
}

}  // namespace

std::vector<BiTemporalSample> synth_generate(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const int s = cfg.image_size;
    const Palette palette = default_palette(cfg.n_classes);

    std::vector<BiTemporalSample> out;
    out.reserve(static_cast<size_t>(cfg.n_samples));
    for (int idx = 0; idx < cfg.n_samples; ++idx) {
        // --- scene description -------------------------------------------
        const int n_shapes = static_cast<int>(
            rng.uniform_int(cfg.min_shapes, cfg.max_shapes));
        std::vector<Shape> shapes;
        shapes.reserve(static_cast<size_t>(n_shapes));
        for (int k = 0; k < n_shapes; ++k) {
            Shape sh;
            sh.kind = static_cast<ShapeKind>(rng.uniform_int(0, 2));
            sh.cx = rng.uniform(0.0, s);
            sh.cy = rng.uniform(0.0, s);
            sh.rx = rng.uniform(s / 10.0, s / 3.5);
            sh.ry = rng.uniform(s / 10.0, s / 3.5);
            for (int v = 0; v < 3; ++v) {
                sh.tri[static_cast<size_t>(2 * v)] =
                    sh.cx + rng.uniform(-1.0, 1.0) * sh.rx;
                sh.tri[static_cast<size_t>(2 * v + 1)] =
                    sh.cy + rng.uniform(-1.0, 1.0) * sh.ry;
            }
            const int cls = static_cast<int>(rng.uniform_int(1, cfg.n_classes));
            sh.class_t1 = cls;
            sh.class_t2 = cls;
            if (rng.bernoulli(cfg.change_density)) {
                switch (rng.uniform_int(0, 2)) {
                    case 0:  // appears
                        sh.class_t1 = 0;
                        break;
                    case 1:  // disappears
                        sh.class_t2 = 0;
                        break;
                    default: {  // switches class
                        int other = static_cast<int>(rng.uniform_int(1, cfg.n_classes - 1));
                        if (other >= cls) ++other;
                        sh.class_t2 = other;
                        break;
                    }
                }
            }
            shapes.push_back(sh);
        }

        // --- labels straight from the scene ------------------------------
        BiTemporalSample sample;
        sample.id = "s" + std::to_string(10000 + idx).substr(1);
        Tensor<int32_t> vis1({s, s}), vis2({s, s});
        paint_visibility(shapes, 1, vis1);
        paint_visibility(shapes, 2, vis2);
        sample.sem_t1 = Tensor<int32_t>({s, s});
        sample.sem_t2 = Tensor<int32_t>({s, s});
        sample.change_mask = Tensor<uint8_t>({s, s});
        for (int64_t p = 0; p < static_cast<int64_t>(s) * s; ++p) {
            const bool changed = vis1[p] != vis2[p];
            sample.change_mask[p] = changed ? 1 : 0;
            sample.sem_t1[p] = changed ? vis1[p] : 0;
            sample.sem_t2[p] = changed ? vis2[p] : 0;
        }

        // --- appearance ---------------------------------------------------
        // Per-date global illumination keeps raw differencing from solving
        // the task; per-pixel noise textures every region.
        const double illum1 = rng.uniform(-0.08, 0.08);
        const double illum2 = rng.uniform(-0.08, 0.08);
        sample.image_t1 = Tensor<float>({3, s, s});
        sample.image_t2 = Tensor<float>({3, s, s});
        const std::array<double, 3> bg = {0.16, 0.17, 0.15};
        for (int date = 1; date <= 2; ++date) {
            const Tensor<int32_t>& vis = date == 1 ? vis1 : vis2;
            Tensor<float>& img = date == 1 ? sample.image_t1 : sample.image_t2;
            const double illum = date == 1 ? illum1 : illum2;
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x) {
                    const int cls = vis[y * s + x];
                    for (int c = 0; c < 3; ++c) {
                        double base = cls == 0
                                          ? bg[static_cast<size_t>(c)]
                                          : palette.color_for_id(cls)[static_cast<size_t>(c)] /
                                                255.0;
                        base += illum + rng.gaussian(0.0, cfg.noise_amplitude);
                        img[(static_cast<int64_t>(c) * s + y) * s + x] =
                            static_cast<float>(quantize(base) / 255.0);
                    }
                }
        }
        out.push_back(std::move(sample));
    }
    return out;
}

// ---- disk io ---------------------------------------------------------------

RgbImage labels_to_raster(const Tensor<int32_t>& labels, const Palette& palette) {
    RgbImage img(labels.dim(0), labels.dim(1));
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const auto rgb = palette.color_for_id(labels[y * img.width + x]);
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[static_cast<size_t>(c)];
        }
    return img;
}

Tensor<int32_t> raster_to_labels(const RgbImage& img, const Palette& palette,
                                 const std::string& file) {
    Tensor<int32_t> labels({img.height, img.width});
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const int id = palette.id_for_color(img.at(y, x, 0), img.at(y, x, 1),
                                                img.at(y, x, 2));
            if (id < 0)
                throw UnknownColor(file + ": pixel (" + std::to_string(x) + "," +
                                   std::to_string(y) + ") color " +
                                   std::to_string(img.at(y, x, 0)) + "," +
                                   std::to_string(img.at(y, x, 1)) + "," +
                                   std::to_string(img.at(y, x, 2)) +
                                   " is not in the palette");
            labels[y * img.width + x] = id;
        }
    return labels;
}

RgbImage mask_to_raster(const Tensor<uint8_t>& mask) {
    RgbImage img(mask.dim(0), mask.dim(1));
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const uint8_t v = mask[y * img.width + x] ? 255 : 0;
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = v;
        }
    return img;
}

Tensor<uint8_t> raster_to_mask(const RgbImage& img, const std::string& file) {
    Tensor<uint8_t> mask({img.height, img.width});
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const uint8_t r = img.at(y, x, 0), g = img.at(y, x, 1), b = img.at(y, x, 2);
            if (r != g || g != b || (r != 0 && r != 255))
                throw UnknownColor(file + ": pixel (" + std::to_string(x) + "," +
                                   std::to_string(y) + ") is neither black nor white");
            mask[y * img.width + x] = r ? 1 : 0;
        }
    return mask;
}

RgbImage float_image_to_raster(const Tensor<float>& img) {
    RgbImage out(img.dim(1), img.dim(2));
    const int64_t hw = static_cast<int64_t>(out.height) * out.width;
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(y, x, c) = quantize(img[c * hw + y * out.width + x]);
    return out;
}

Tensor<float> raster_to_float_image(const RgbImage& img) {
    Tensor<float> out({3, img.height, img.width});
    const int64_t hw = static_cast<int64_t>(img.height) * img.width;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                out[c * hw + y * img.width + x] =
                    static_cast<float>(img.at(y, x, c) / 255.0);
    return out;
}

void export_corpus(const CorpusLayout& layout, const std::vector<BiTemporalSample>& samples,
                   const Palette& palette) {
    for (const std::string& d : {layout.im1_dir(), layout.im2_dir(), layout.label1_dir(),
                                 layout.label2_dir(), layout.change_dir()}) {
        std::error_code ec;
        fs::create_directories(d, ec);
        if (ec) throw IoError("cannot create " + d + ": " + ec.message());
    }
    save_palette(layout.palette_file(), palette);
    for (const BiTemporalSample& s : samples) {
        write_png(layout.im1_dir() + "/" + s.id + ".png", float_image_to_raster(s.image_t1));
        write_png(layout.im2_dir() + "/" + s.id + ".png", float_image_to_raster(s.image_t2));
        write_png(layout.label1_dir() + "/" + s.id + ".png",
                  labels_to_raster(s.sem_t1, palette));
        write_png(layout.label2_dir() + "/" + s.id + ".png",
                  labels_to_raster(s.sem_t2, palette));
        write_png(layout.change_dir() + "/" + s.id + ".png", mask_to_raster(s.change_mask));
    }
}

std::vector<BiTemporalSample> load_corpus(const CorpusLayout& layout) {
    if (!fs::is_directory(layout.im1_dir())) return {};
    std::vector<std::string> ids;
    for (const auto& entry : fs::directory_iterator(layout.im1_dir())) {
        if (entry.path().extension() == ".png") ids.push_back(entry.path().stem().string());
    }
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) return {};

    const Palette palette = load_palette(layout.palette_file());
    const int n_classes = palette.max_id();

    std::vector<BiTemporalSample> out;
    out.reserve(ids.size());
    for (const std::string& id : ids) {
        const std::string f_im1 = layout.im1_dir() + "/" + id + ".png";
        const std::string f_im2 = layout.im2_dir() + "/" + id + ".png";
        const std::string f_l1 = layout.label1_dir() + "/" + id + ".png";
        const std::string f_l2 = layout.label2_dir() + "/" + id + ".png";
        const std::string f_ch = layout.change_dir() + "/" + id + ".png";
        for (const std::string& f : {f_im2, f_l1, f_l2, f_ch})
            if (!fs::exists(f)) throw MissingFile(f + " is missing for sample " + id);

        BiTemporalSample s;
        s.id = id;
        s.image_t1 = raster_to_float_image(read_png(f_im1));
        s.image_t2 = raster_to_float_image(read_png(f_im2));
        s.sem_t1 = raster_to_labels(read_png(f_l1), palette, f_l1);
        s.sem_t2 = raster_to_labels(read_png(f_l2), palette, f_l2);
        s.change_mask = raster_to_mask(read_png(f_ch), f_ch);

        if (s.image_t1.dim(1) != s.sem_t1.dim(0) || s.image_t1.dim(2) != s.sem_t1.dim(1))
            throw ShapeMismatch("sample " + id + ": image and label grids disagree");
        validate_sample(s, n_classes);
        out.push_back(std::move(s));
    }
    return out;
}

// ---- splits ----------------------------------------------------------------

std::pair<std::vector<BiTemporalSample>, std::vector<BiTemporalSample>> split_corpus(
    const std::vector<BiTemporalSample>& corpus, double train_fraction, double test_fraction,
    uint64_t seed) {
    if (std::abs(train_fraction + test_fraction - 1.0) > 1e-9)
        throw ConfigError("split fractions must sum to 1");
    const int64_t n = static_cast<int64_t>(corpus.size());
    const int64_t n_train = std::llround(train_fraction * static_cast<double>(n));
    if (n_train <= 0 || n_train >= n)
        throw EmptySplit("split " + std::to_string(train_fraction) + "/" +
                         std::to_string(test_fraction) + " of " + std::to_string(n) +
                         " samples leaves one side empty");

    std::vector<int64_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
    Rng rng(seed);
    for (int64_t i = n - 1; i > 0; --i) {
        const int64_t j = rng.uniform_int(0, i);
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }

    std::pair<std::vector<BiTemporalSample>, std::vector<BiTemporalSample>> result;
    for (int64_t i = 0; i < n; ++i) {
        const BiTemporalSample& s = corpus[static_cast<size_t>(order[static_cast<size_t>(i)])];
        (i < n_train ? result.first : result.second).push_back(s);
    }
    return result;
}

void save_splits(const std::string& path, const std::vector<std::string>& train_ids,
                 const std::vector<std::string>& test_ids) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot create " + path);
    for (const auto& id : train_ids) out << "train " << id << '\n';
    for (const auto& id : test_ids) out << "test " << id << '\n';
    if (!out) throw IoError("failed writing " + path);
}

std::pair<std::vector<std::string>, std::vector<std::string>> load_splits(
    const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingFile("cannot open " + path);
    std::pair<std::vector<std::string>, std::vector<std::string>> out;
    std::string split, id;
    int lineno = 0;
    std::string line;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream is(line);
        if (!(is >> split >> id) || (split != "train" && split != "test"))
            throw IoError(path + ":" + std::to_string(lineno) + ": malformed split line");
        (split == "train" ? out.first : out.second).push_back(id);
    }
    return out;
}

}  // namespace foba
