#include "bdefs/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "bdefs/rng.hpp"

namespace fs = std::filesystem;

namespace bdefs::pipeline {

std::vector<std::string> default_class_names(std::size_t k) {
  if (k == 3) return {"covid", "normal", "pneumonia"};
  std::vector<std::string> names;
  for (std::size_t c = 0; c < k; ++c) names.push_back("class" + std::to_string(c));
  return names;
}

// ---- splits -----------------------------------------------------------------

namespace {

std::size_t split_part_size(std::size_t n) {
  return static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(n)));
}

// Largest-remainder allocation of `total` across classes with per-class
// upper bounds.
std::vector<std::size_t> allocate_counts(const std::vector<double>& quotas,
                                         std::size_t total,
                                         const std::vector<std::size_t>& cap) {
  const std::size_t k = quotas.size();
  std::vector<std::size_t> counts(k);
  std::vector<double> remainder(k);
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < k; ++c) {
    counts[c] = std::min(static_cast<std::size_t>(quotas[c]), cap[c]);
    remainder[c] = quotas[c] - static_cast<double>(counts[c]);
    assigned += counts[c];
  }
  std::vector<std::size_t> order(k);
  for (std::size_t c = 0; c < k; ++c) order[c] = c;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return remainder[a] > remainder[b];
  });
  std::size_t cursor = 0;
  while (assigned < total) {
    const std::size_t c = order[cursor % k];
    if (counts[c] < cap[c]) {
      ++counts[c];
      ++assigned;
    }
    ++cursor;
    if (cursor > 4 * k * (total + 1))
      throw std::logic_error("allocate_counts: allocation did not converge");
  }
  return counts;
}

}  // namespace

SplitIndices split_data(std::size_t n, std::uint64_t seed) {
  if (n < 10) throw std::invalid_argument("split_data: need at least 10 samples");
  const std::size_t part = split_part_size(n);
  SplitIndices split;
  split.seed = seed;
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(seed);
  rng.shuffle(perm);
  const std::size_t train_n = n - 2 * part;
  split.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(train_n));
  split.validation.assign(perm.begin() + static_cast<std::ptrdiff_t>(train_n),
                          perm.begin() + static_cast<std::ptrdiff_t>(train_n + part));
  split.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(train_n + part),
                    perm.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.validation.begin(), split.validation.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

SplitIndices split_data_stratified(std::span<const int> labels, std::size_t k,
                                   std::uint64_t seed) {
  const std::size_t n = labels.size();
  if (n < 10)
    throw std::invalid_argument("split_data_stratified: need at least 10 samples");
  std::vector<std::vector<std::size_t>> by_class(k);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw std::out_of_range("split_data_stratified: label out of range");
    by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  Rng rng(seed);
  for (auto& cls : by_class) rng.shuffle(cls);

  const std::size_t part = split_part_size(n);
  std::vector<double> quotas(k);
  std::vector<std::size_t> caps(k);
  for (std::size_t c = 0; c < k; ++c) {
    quotas[c] = 0.15 * static_cast<double>(by_class[c].size());
    caps[c] = by_class[c].size();
  }
  const auto test_counts = allocate_counts(quotas, part, caps);
  for (std::size_t c = 0; c < k; ++c) caps[c] -= test_counts[c];
  const auto val_counts = allocate_counts(quotas, part, caps);

  SplitIndices split;
  split.seed = seed;
  for (std::size_t c = 0; c < k; ++c) {
    const auto& cls = by_class[c];
    std::size_t pos = 0;
    for (std::size_t i = 0; i < test_counts[c]; ++i) split.test.push_back(cls[pos++]);
    for (std::size_t i = 0; i < val_counts[c]; ++i)
      split.validation.push_back(cls[pos++]);
    while (pos < cls.size()) split.train.push_back(cls[pos++]);
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.validation.begin(), split.validation.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

// ---- PGM ---------------------------------------------------------------------

namespace {

int next_pgm_token(std::istream& in, const std::string& path) {
  // Skips whitespace and '#' comments.
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  if (c == EOF) throw std::runtime_error("pgm: truncated header in " + path);
  int value = 0;
  bool any = false;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    any = true;
    c = in.get();
  }
  if (!any) throw std::runtime_error("pgm: malformed header in " + path);
  return value;
}

}  // namespace

cnn::Image read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("pgm: cannot open " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '5')
    throw std::runtime_error("pgm: not a binary P5 file: " + path);
  const int width = next_pgm_token(in, path);
  const int height = next_pgm_token(in, path);
  const int maxval = next_pgm_token(in, path);
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 255)
    throw std::runtime_error("pgm: unsupported header values in " + path);

  cnn::Image img;
  img.width = static_cast<std::size_t>(width);
  img.height = static_cast<std::size_t>(height);
  img.channels = 1;
  std::vector<unsigned char> raw(img.width * img.height);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw std::runtime_error("pgm: truncated pixel data in " + path);
  img.pixels.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    img.pixels[i] = static_cast<double>(raw[i]) / static_cast<double>(maxval);
  return img;
}

void write_pgm(const cnn::Image& img, const std::string& path) {
  if (img.channels != 1)
    throw std::invalid_argument("write_pgm: only single-channel images");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("pgm: cannot write " + path);
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double v = std::clamp(img.pixels[i], 0.0, 1.0) * 255.0;
    raw[i] = static_cast<unsigned char>(std::lround(v));
  }
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size()));
}

LabeledDataset load_images(const std::string& root) {
  if (!fs::is_directory(root))
    throw std::runtime_error("load_images: not a directory: " + root);
  std::vector<std::string> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path().filename().string());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty())
    throw std::runtime_error("load_images: no class directories under " + root);

  LabeledDataset ds;
  ds.class_names = class_dirs;
  std::vector<std::string> bad_dimension_files;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(fs::path(root) / class_dirs[c]))
      if (entry.is_regular_file() && entry.path().extension() == ".pgm")
        files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty())
      throw std::runtime_error("load_images: empty class directory " + class_dirs[c]);
    for (const auto& file : files) {
      cnn::Image img = read_pgm(file);
      if (!ds.images.empty() && (img.height != ds.images.front().height ||
                                 img.width != ds.images.front().width))
        bad_dimension_files.push_back(file);
      ds.images.push_back(std::move(img));
      ds.labels.push_back(static_cast<int>(c));
      ds.sources.push_back(file);
    }
  }
  if (!bad_dimension_files.empty()) {
    std::string msg = "load_images: inconsistent dimensions in:";
    for (const auto& f : bad_dimension_files) msg += " " + f;
    throw std::runtime_error(msg);
  }
  return ds;
}

// ---- feature CSV ---------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_cell(const std::string& cell, std::size_t row, std::size_t col) {
  const char* begin = cell.c_str();
  char* end = nullptr;
  const double value = std::strtod(begin, &end);
  while (end && *end != '\0' && std::isspace(static_cast<unsigned char>(*end))) ++end;
  if (end == begin || (end && *end != '\0'))
    throw std::runtime_error("feature csv: non-numeric cell at row " +
                             std::to_string(row) + " column " + std::to_string(col));
  return value;
}

}  // namespace

LabeledDataset load_features(const std::string& csv_path, std::size_t expected_k) {
  std::ifstream in(csv_path);
  if (!in) throw std::runtime_error("feature csv: cannot open " + csv_path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("feature csv: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);
  if (header.empty() || header.back() != "label")
    throw std::runtime_error("feature csv: missing label column");
  const std::size_t dim = header.size() - 1;
  if (dim == 0) throw std::runtime_error("feature csv: no feature columns");

  std::vector<double> values;
  std::vector<int> labels;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw std::runtime_error("feature csv: row " + std::to_string(row) + " has " +
                               std::to_string(cells.size()) + " cells, expected " +
                               std::to_string(header.size()));
    for (std::size_t c = 0; c < dim; ++c)
      values.push_back(parse_cell(cells[c], row, c));
    const double raw_label = parse_cell(cells[dim], row, dim);
    const int label = static_cast<int>(raw_label);
    if (static_cast<double>(label) != raw_label || label < 0)
      throw std::runtime_error("feature csv: label at row " + std::to_string(row) +
                               " is not a nonnegative integer");
    labels.push_back(label);
    ++row;
  }
  if (labels.empty()) throw std::runtime_error("feature csv: no data rows");

  std::size_t k = expected_k;
  int max_label = 0;
  for (int l : labels) max_label = std::max(max_label, l);
  if (k == 0)
    k = static_cast<std::size_t>(max_label) + 1;
  else if (static_cast<std::size_t>(max_label) >= k)
    throw std::runtime_error("feature csv: label " + std::to_string(max_label) +
                             " out of range for " + std::to_string(k) + " classes");

  LabeledDataset ds;
  ds.features = Matrix(labels.size(), dim);
  std::copy(values.begin(), values.end(), ds.features.data().begin());
  ds.labels = std::move(labels);
  ds.class_names = default_class_names(k);
  ds.sources.push_back(csv_path);
  return ds;
}

void save_features(const LabeledDataset& ds, const std::string& csv_path) {
  if (!ds.has_features()) throw std::invalid_argument("save_features: no features");
  std::ofstream out(csv_path);
  if (!out) throw std::runtime_error("feature csv: cannot write " + csv_path);
  for (std::size_t c = 0; c < ds.features.cols(); ++c) out << 'f' << c << ',';
  out << "label\n";
  char buf[32];
  for (std::size_t r = 0; r < ds.features.rows(); ++r) {
    for (std::size_t c = 0; c < ds.features.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", ds.features(r, c));
      out << buf << ',';
    }
    out << ds.labels[r] << '\n';
  }
}

// ---- synthetic corpora ----------------------------------------------------------

LabeledDataset synth_features(const SynthFeatureSpec& spec, std::uint64_t seed) {
  if (spec.informative > spec.dim)
    throw std::invalid_argument("synth_features: informative count exceeds dim");
  if (spec.classes < 2 || spec.n < spec.classes)
    throw std::invalid_argument("synth_features: bad class/sample counts");

  // Staircase means: informative column j carries the step between classes
  // (j mod (K-1)) and (j mod (K-1)) + 1, so with informative = K - 1 each
  // column is the sole separator of one adjacent class pair and no subset
  // missing it can tell those classes apart. The per-column gap is at least
  // twice the noise scale.
  const double offset = std::max(1.0, 5.0 * spec.noise);
  Matrix means(spec.classes, spec.dim);
  for (std::size_t j = 0; j < spec.informative; ++j)
    for (std::size_t c = 0; c < spec.classes; ++c)
      means(c, j) = (j % (spec.classes - 1)) < c ? offset : 0.0;

  Rng rng(seed);
  LabeledDataset ds;
  ds.features = Matrix(spec.n, spec.dim);
  ds.labels.resize(spec.n);
  ds.class_names = default_class_names(spec.classes);
  for (std::size_t i = 0; i < spec.n; ++i) {
    const std::size_t cls = i % spec.classes;
    ds.labels[i] = static_cast<int>(cls);
    for (std::size_t j = 0; j < spec.dim; ++j) {
      if (j < spec.informative)
        ds.features(i, j) = means(cls, j) + rng.normal(0.0, spec.noise);
      else
        ds.features(i, j) = rng.normal(0.0, 1.0);
    }
  }
  return ds;
}

namespace {

void paint_pattern(cnn::Image& img, std::size_t cls, Rng& rng) {
  const double h = static_cast<double>(img.height);
  const double w = static_cast<double>(img.width);
  const double jx = static_cast<double>(rng.below(5)) - 2.0;
  const double jy = static_cast<double>(rng.below(5)) - 2.0;
  const double cx = w / 2.0 + jx;
  const double cy = h / 2.0 + jy;
  const double r = std::min(h, w) / 4.0;
  const int phase = static_cast<int>(rng.below(4));

  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      bool on = false;
      switch (cls % 6) {
        case 0:  // filled disk
          on = dx * dx + dy * dy <= r * r;
          break;
        case 1:  // vertical stripes
          on = ((static_cast<int>(x) + phase) / 3) % 2 == 0;
          break;
        case 2:  // diagonal cross
          on = std::abs(dx - dy) < 2.0 || std::abs(dx + dy) < 2.0;
          break;
        case 3:  // horizontal stripes
          on = ((static_cast<int>(y) + phase) / 3) % 2 == 0;
          break;
        case 4:  // ring
          on = std::abs(std::sqrt(dx * dx + dy * dy) - r) < 2.0;
          break;
        default:  // checkerboard
          on = (((x + static_cast<std::size_t>(phase)) / 4 + y / 4) % 2) == 0;
          break;
      }
      img.at(y, x, 0) = on ? 0.85 : 0.1;
    }
}

}  // namespace

LabeledDataset synth_images(const SynthImageSpec& spec, std::uint64_t seed) {
  if (spec.classes < 2 || spec.classes > 6)
    throw std::invalid_argument("synth_images: supports 2..6 pattern classes");
  if (spec.height < 8 || spec.width < 8)
    throw std::invalid_argument("synth_images: image side must be at least 8");
  Rng rng(seed);
  LabeledDataset ds;
  ds.class_names = default_class_names(spec.classes);
  ds.images.resize(spec.n);
  ds.labels.resize(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) {
    cnn::Image& img = ds.images[i];
    img.height = spec.height;
    img.width = spec.width;
    img.channels = 1;
    img.pixels.assign(spec.height * spec.width, 0.0);
    const std::size_t cls = i % spec.classes;
    ds.labels[i] = static_cast<int>(cls);
    paint_pattern(img, cls, rng);
    if (spec.noise > 0.0)
      for (auto& p : img.pixels)
        p = std::clamp(p + rng.normal(0.0, spec.noise), 0.0, 1.0);
  }
  return ds;
}

}  // namespace bdefs::pipeline
