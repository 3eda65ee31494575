#pragma once

// Corpus handling: the on-disk directory contract, color palettes for label
// rasters, a deterministic synthetic scene generator, and split management.
//
// Directory contract, rooted at `root`:
//   im1/<id>.png     first-date image, 8-bit RGB
//   im2/<id>.png     second-date image
//   label1/<id>.png  first-date semantic labels, palette-colored
//   label2/<id>.png  second-date semantic labels
//   change/<id>.png  binary change mask, black = 0, white = 1
//   palette.txt      lines "id r g b name", one per class id
//   splits.txt       lines "<split-name> <id>" (written by save_splits)

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "foba/png_io.hpp"

#include "foba/core_types.hpp"

namespace foba {

struct PaletteEntry {
    int id = 0;
    std::array<uint8_t, 3> rgb = {0, 0, 0};
    std::string name;
};

// Injective mapping class id <-> label color.
class Palette {
public:
    Palette() = default;
    explicit Palette(std::vector<PaletteEntry> entries);  // validates injectivity

    const std::vector<PaletteEntry>& entries() const { return entries_; }
    int max_id() const;

    // -1 when no entry carries this color.
    int id_for_color(uint8_t r, uint8_t g, uint8_t b) const;
    // Throws LabelOutOfRange for an id without an entry.
    std::array<uint8_t, 3> color_for_id(int id) const;

private:
    std::vector<PaletteEntry> entries_;
};

// Background plus n_classes visually distinct colors, stable across calls.
Palette default_palette(int n_classes);

Palette load_palette(const std::string& path);  // MissingFile, IoError
void save_palette(const std::string& path, const Palette& palette);

struct CorpusLayout {
    std::string root;

    std::string im1_dir() const { return root + "/im1"; }
    std::string im2_dir() const { return root + "/im2"; }
    std::string label1_dir() const { return root + "/label1"; }
    std::string label2_dir() const { return root + "/label2"; }
    std::string change_dir() const { return root + "/change"; }
    std::string palette_file() const { return root + "/palette.txt"; }
    std::string splits_file() const { return root + "/splits.txt"; }
};

struct SynthConfig {
    int n_samples = 64;
    int image_size = 64;        // must be divisible by 32
    int n_classes = 4;          // N >= 2
    int min_shapes = 3;
    int max_shapes = 7;
    double change_density = 0.5;   // per-shape probability of a between-date event
    double noise_amplitude = 0.03; // texture noise, unit-interval scale
    uint64_t seed = 1;

    void validate() const;  // throws ConfigError
};

// Scenes of colored ellipses, boxes and triangles over a textured background.
// Each shape persists, appears, disappears or switches class between the two
// dates; labels and the change mask fall out of that scene description
// exactly. One sequential stream drawn from cfg.seed decides everything, so
// equal configs give bit-identical corpora.
std::vector<BiTemporalSample> synth_generate(const SynthConfig& cfg);

// Writes samples plus palette under layout. Images are quantized to the
// stored 8-bit encoding, so generated corpora reload bit-exactly.
void export_corpus(const CorpusLayout& layout, const std::vector<BiTemporalSample>& samples,
                   const Palette& palette);

// Loads every sample listed in im1/. An absent corpus yields an empty list;
// a partially present sample raises MissingFile, an off-palette label pixel
// raises UnknownColor, disagreeing rasters raise ShapeMismatch.
std::vector<BiTemporalSample> load_corpus(const CorpusLayout& layout);

// Deterministic shuffle-and-cut. Fractions must sum to 1; each side must end
// up non-empty, otherwise EmptySplit.
std::pair<std::vector<BiTemporalSample>, std::vector<BiTemporalSample>> split_corpus(
    const std::vector<BiTemporalSample>& corpus, double train_fraction, double test_fraction,
    uint64_t seed);

void save_splits(const std::string& path, const std::vector<std::string>& train_ids,
                 const std::vector<std::string>& test_ids);
// Returns {train ids, test ids}.
std::pair<std::vector<std::string>, std::vector<std::string>> load_splits(
    const std::string& path);

// Conversions between in-memory fields and their 8-bit raster encodings.
// raster_to_labels / raster_to_mask raise UnknownColor for a pixel outside
// the expected encoding, naming the offending file and position.
RgbImage labels_to_raster(const Tensor<int32_t>& labels, const Palette& palette);
Tensor<int32_t> raster_to_labels(const RgbImage& img, const Palette& palette,
                                 const std::string& file);
RgbImage mask_to_raster(const Tensor<uint8_t>& mask);
Tensor<uint8_t> raster_to_mask(const RgbImage& img, const std::string& file);
RgbImage float_image_to_raster(const Tensor<float>& img);
Tensor<float> raster_to_float_image(const RgbImage& img);

}  // namespace foba
