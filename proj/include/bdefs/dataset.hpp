#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bdefs/convnet.hpp"
#include "bdefs/matrix.hpp"

namespace bdefs::pipeline {

// Image or precomputed-feature corpus with labels 0..K-1. Class names map
// label index to directory/report name; the default 3-class map is
// covid / normal / pneumonia.
struct LabeledDataset {
  std::vector<cnn::Image> images;  // empty in feature mode
  Matrix features;                 // 0x0 in image mode
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::vector<std::string> sources;  // provenance paths when loaded from disk

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  bool has_images() const { return !images.empty(); }
  bool has_features() const { return !features.empty(); }
};

std::vector<std::string> default_class_names(std::size_t k);

// Disjoint train/validation/test index sets; test and validation sizes are
// round(0.15 * n) each, train takes the remainder.
struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;
};

SplitIndices split_data(std::size_t n, std::uint64_t seed);

// Same global split sizes, with per-class counts allocated by largest
// remainder so class proportions carry over.
SplitIndices split_data_stratified(std::span<const int> labels, std::size_t k,
                                   std::uint64_t seed);

// ---- disk formats ----------------------------------------------------------

// root/<class>/<name>.pgm, binary 8-bit P5; labels follow lexicographic
// directory order.
LabeledDataset load_images(const std::string& root);

cnn::Image read_pgm(const std::string& path);
void write_pgm(const cnn::Image& img, const std::string& path);

// Header f0,...,f{D-1},label; label is an integer class id. expected_k = 0
// infers the class count from the data.
LabeledDataset load_features(const std::string& csv_path, std::size_t expected_k = 0);
void save_features(const LabeledDataset& ds, const std::string& csv_path);

// ---- synthetic corpora -------------------------------------------------------

struct SynthFeatureSpec {
  std::size_t n = 200;
  std::size_t dim = 20;
  std::size_t informative = 5;
  double noise = 1.0;  // stdev on informative columns; others are unit normal
  std::size_t classes = 3;
};

// Class means differ only on the informative columns (pair-coded offsets of
// at least 2 * noise); remaining columns are pure standard normal noise.
LabeledDataset synth_features(const SynthFeatureSpec& spec, std::uint64_t seed);

struct SynthImageSpec {
  std::size_t n = 300;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t classes = 3;
  double noise = 0.15;  // additive pixel noise, clamped to [0, 1]
};

// Class-distinct geometric patterns (disk, stripes, diagonal cross, ...)
// with per-sample jitter plus pixel noise.
LabeledDataset synth_images(const SynthImageSpec& spec, std::uint64_t seed);

}  // namespace bdefs::pipeline
