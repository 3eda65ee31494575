#include "foba/plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "foba/errors.hpp"
#include "foba/graph.hpp"
#include "foba/png_io.hpp"

namespace fs = std::filesystem;

namespace foba {

namespace {

using Color = std::array<uint8_t, 3>;

void put(RgbImage& img, int x, int y, Color c) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    for (int i = 0; i < 3; ++i) img.at(y, x, i) = c[static_cast<size_t>(i)];
}

void line(RgbImage& img, int x0, int y0, int x1, int y1, Color c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        put(img, x0, y0, c);
        if (x0 == x1 && y0 == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

// 5x7 glyphs, one byte per row, low 5 bits used.
const std::array<uint8_t, 7>* glyph(char ch) {
    static const std::array<std::pair<char, std::array<uint8_t, 7>>, 26> table = {{
        {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
        {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
        {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
        {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
        {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
        {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
        {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
        {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
        {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
        {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
        {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
        {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
        {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}},
        {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
        {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
        {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
        {'D', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
        {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
        {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
        {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
        {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
        {'N', {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11}},
        {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
        {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
        {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
        {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    }};
    for (const auto& [c, g] : table)
        if (c == ch) return &g;
    return nullptr;
}

void text(RgbImage& img, int x, int y, const std::string& s, Color c) {
    for (char ch : s) {
        if (const auto* g = glyph(ch)) {
            for (int row = 0; row < 7; ++row)
                for (int col = 0; col < 5; ++col)
                    if ((*g)[static_cast<size_t>(row)] & (1 << (4 - col)))
                        put(img, x + col, y + row, c);
        }
        x += 6;
    }
}

std::string short_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3G", v);
    return buf;
}

}  // namespace

void plot_loss_curve(const std::string& path, const std::vector<StepRecord>& history) {
    const int W = 720, H = 400;
    const int left = 56, right = W - 16, top = 20, bottom = H - 32;
    RgbImage img(H, W);
    std::fill(img.pixels.begin(), img.pixels.end(), uint8_t{250});

    const Color axis{90, 90, 90}, grid{225, 225, 225}, ink{40, 40, 40};
    double ymax = 1e-12;
    for (const auto& r : history)
        ymax = std::max({ymax, r.total, r.l_bcd, r.l_scd, r.l_cons, r.l_sample, r.l_f});
    ymax *= 1.05;
    const int64_t xmax = history.empty() ? 1 : history.back().step;

    auto px = [&](int64_t step) {
        return left + static_cast<int>((right - left) *
                                       (static_cast<double>(step) / static_cast<double>(xmax)));
    };
    auto py = [&](double v) {
        return bottom - static_cast<int>((bottom - top) * (v / ymax));
    };

    for (int i = 0; i <= 4; ++i) {
        const double v = ymax * i / 4.0;
        const int y = py(v);
        line(img, left, y, right, y, grid);
        text(img, 4, y - 3, short_number(v), ink);
    }
    line(img, left, top, left, bottom, axis);
    line(img, left, bottom, right, bottom, axis);
    text(img, (left + right) / 2 - 12, H - 12, "STEP", ink);
    text(img, left, 6, "LOSS", ink);
    text(img, right - 30, bottom + 4, short_number(static_cast<double>(xmax)), ink);

    struct Series {
        const char* label;
        Color color;
        double StepRecord::* field;
    };
    const Series series[] = {
        {"TOTAL", {30, 30, 30}, &StepRecord::total},
        {"BCD", {220, 60, 50}, &StepRecord::l_bcd},
        {"SCD", {50, 90, 220}, &StepRecord::l_scd},
        {"CONS", {150, 60, 200}, &StepRecord::l_cons},
        {"SAMP", {40, 160, 90}, &StepRecord::l_sample},
        {"MASK", {235, 150, 40}, &StepRecord::l_f},
    };
    int ly = top + 4;
    for (const auto& s : series) {
        for (size_t i = 1; i < history.size(); ++i)
            line(img, px(history[i - 1].step), py(history[i - 1].*(s.field)),
                 px(history[i].step), py(history[i].*(s.field)), s.color);
        if (!history.empty()) {
            line(img, right - 64, ly + 3, right - 52, ly + 3, s.color);
            text(img, right - 48, ly, s.label, ink);
            ly += 10;
        }
    }
    write_png(path, img);
}

template <typename T>
void save_mask_snapshots(const std::string& dir, const FoBaModel<T>& model,
                         const BiTemporalSample& sample) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir);

    Graph<T> g(false);
    FoBaOutput<T> out = model.forward(g, tensor_cast<T>(sample.image_t1),
                                      tensor_cast<T>(sample.image_t2));
    const int H = sample.height(), W = sample.width();
    for (size_t i = 0; i < out.stage_masks.size(); ++i) {
        const Tensor<T>& m = g.val(out.stage_masks[i]);
        const int mh = m.dim(1), mw = m.dim(2);
        RgbImage img(H, W);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const int sy = y * mh / H, sx = x * mw / W;
                const double v = static_cast<double>(m[sy * mw + sx]);
                const auto gray = static_cast<uint8_t>(std::lround(255.0 * v));
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = gray;
            }
        write_png(dir + "/stage_" + std::to_string(i) + ".png", img);
    }
    write_png(dir + "/change_gt.png", mask_to_raster(sample.change_mask));
}

template void save_mask_snapshots<float>(const std::string&, const FoBaModel<float>&,
                                         const BiTemporalSample&);
template void save_mask_snapshots<double>(const std::string&, const FoBaModel<double>&,
                                          const BiTemporalSample&);

}  // namespace foba
