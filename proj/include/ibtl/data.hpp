#pragma once

// Datasets and their constructors: synthetic gaussian-blob generators with
// controlled source/target shift, validation splitting, label corruption
// with ground-truth flip sets, the skewed (majority-class) test-set builder,
// exact image flip/rotation permutations, and CSV / IDX loaders.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ibtl/errors.hpp"
#include "ibtl/numkit.hpp"

namespace ibtl {

struct Dataset {
  Matrix features;                // n x d
  std::vector<int> labels;        // in [0, num_classes)
  std::vector<std::int64_t> ids;  // stable, unique
  std::size_t num_classes = 0;
  std::optional<std::pair<std::size_t, std::size_t>> image_shape;  // (h, w), h*w = d

  std::size_t size() const { return features.rows; }
  std::size_t dim() const { return features.cols; }

  void validate() const {
    if (features.rows != labels.size() || features.rows != ids.size())
      throw DataError("Dataset: rows, labels and ids must have equal length");
    if (num_classes < 1) throw DataError("Dataset: num_classes must be positive");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
        throw DataError("Dataset: label " + std::to_string(labels[i]) + " at row " +
                        std::to_string(i) + " outside [0, " + std::to_string(num_classes) + ")");
    std::set<std::int64_t> seen(ids.begin(), ids.end());
    if (seen.size() != ids.size()) throw DataError("Dataset: duplicate sample ids");
    if (image_shape && image_shape->first * image_shape->second != dim())
      throw DataError("Dataset: image shape does not match feature dimension");
    for (double v : features.data)
      if (!std::isfinite(v)) throw DataError("Dataset: non-finite feature value");
  }

  Dataset subset(const std::vector<std::size_t>& indices) const {
    Dataset out;
    out.features = Matrix(indices.size(), dim());
    out.labels.resize(indices.size());
    out.ids.resize(indices.size());
    out.num_classes = num_classes;
    out.image_shape = image_shape;
    for (std::size_t r = 0; r < indices.size(); ++r) {
      const std::size_t i = indices[r];
      if (i >= size()) throw DataError("Dataset::subset: index out of range");
      for (std::size_t c = 0; c < dim(); ++c) out.features(r, c) = features(i, c);
      out.labels[r] = labels[i];
      out.ids[r] = ids[i];
    }
    return out;
  }
};

// Gaussian blobs: class means drawn as spread * N(0, I), one mean per class,
// features = mean + noise * N(0, I), labels round-robin so class counts
// differ by at most one.
inline Dataset gen_blobs(std::size_t num_classes, std::size_t n, std::size_t dim, double spread,
                         double noise, RngStream& rng) {
  if (num_classes < 2) throw DataError("gen_blobs: need at least two classes");
  if (n < num_classes) throw DataError("gen_blobs: need at least one sample per class");
  Matrix means(num_classes, dim);
  for (double& v : means.data) v = spread * rng.next_normal();
  Dataset ds;
  ds.num_classes = num_classes;
  ds.features = Matrix(n, dim);
  ds.labels.resize(n);
  ds.ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = static_cast<int>(i % num_classes);
    ds.ids[i] = static_cast<std::int64_t>(i);
    for (std::size_t j = 0; j < dim; ++j)
      ds.features(i, j) = means(ds.labels[i], j) + noise * rng.next_normal();
  }
  return ds;
}

struct ShiftSpec {
  double mean_offset = 0.0;  // added to every coordinate of each class mean
  double rotation = 0.0;     // radians, applied in the first two coordinates
  double noise_scale = 1.0;  // multiplies the base noise in the target domain
};

struct DomainPair {
  Dataset source;
  Dataset target;
  ShiftSpec shift;
};

// Source and target share the same base class layout; the target means are
// rotated and offset per the shift, realizing two similar-feature-space
// domains where the source has much more data.
inline DomainPair gen_domain_pair(std::size_t num_classes, std::size_t dim, double spread,
                                  double noise, const ShiftSpec& shift, std::size_t n_source,
                                  std::size_t n_target, RngStream& rng) {
  if (num_classes < 2) throw DataError("gen_domain_pair: need at least two classes");
  if (n_source < num_classes || n_target < num_classes)
    throw DataError("gen_domain_pair: need at least one sample per class in each domain");
  Matrix means(num_classes, dim);
  for (double& v : means.data) v = spread * rng.next_normal();

  Matrix target_means = means;
  if (dim >= 2 && shift.rotation != 0.0) {
    const double c = std::cos(shift.rotation), s = std::sin(shift.rotation);
    for (std::size_t k = 0; k < num_classes; ++k) {
      const double a = means(k, 0), b = means(k, 1);
      target_means(k, 0) = c * a - s * b;
      target_means(k, 1) = s * a + c * b;
    }
  }
  for (double& v : target_means.data) v += shift.mean_offset;

  auto draw = [&](const Matrix& m, std::size_t n, double sigma, std::int64_t id_base) {
    Dataset ds;
    ds.num_classes = num_classes;
    ds.features = Matrix(n, dim);
    ds.labels.resize(n);
    ds.ids.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      ds.labels[i] = static_cast<int>(i % num_classes);
      ds.ids[i] = id_base + static_cast<std::int64_t>(i);
      for (std::size_t j = 0; j < dim; ++j)
        ds.features(i, j) = m(ds.labels[i], j) + sigma * rng.next_normal();
    }
    return ds;
  };

  DomainPair pair;
  pair.shift = shift;
  pair.source = draw(means, n_source, noise, 0);
  pair.target = draw(target_means, n_target, noise * shift.noise_scale, 0);
  return pair;
}

// Uniform split without replacement; |val| = max(1, floor(fraction * n)).
inline std::pair<Dataset, Dataset> split_validation(const Dataset& ds, double fraction,
                                                    RngStream& rng) {
  if (ds.size() < 10) throw DataError("split_validation: need at least 10 samples");
  if (fraction <= 0.0 || fraction >= 1.0)
    throw DataError("split_validation: fraction must lie in (0, 1)");
  const std::size_t n_val =
      std::max<std::size_t>(1, static_cast<std::size_t>(fraction * static_cast<double>(ds.size())));
  std::vector<std::size_t> order = shuffled_indices(ds.size(), rng);
  std::vector<std::size_t> val_idx(order.begin(), order.begin() + n_val);
  std::vector<std::size_t> train_idx(order.begin() + n_val, order.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(train_idx.begin(), train_idx.end());
  return {ds.subset(train_idx), ds.subset(val_idx)};
}

// Flip exactly floor(fraction * n) labels, each resampled uniformly from the
// other classes. Returns the corrupted dataset and the exact flipped-id set.
inline std::pair<Dataset, std::vector<std::int64_t>> corrupt_labels(const Dataset& ds,
                                                                    double fraction,
                                                                    RngStream& rng) {
  if (fraction <= 0.0 || fraction >= 1.0)
    throw DataError("corrupt_labels: fraction must lie in (0, 1)");
  if (ds.num_classes < 2) throw DataError("corrupt_labels: need at least two classes");
  const std::size_t n_flip = static_cast<std::size_t>(fraction * static_cast<double>(ds.size()));
  std::vector<std::size_t> order = shuffled_indices(ds.size(), rng);
  std::vector<std::size_t> chosen(order.begin(), order.begin() + n_flip);
  std::sort(chosen.begin(), chosen.end());
  Dataset out = ds;
  std::vector<std::int64_t> flipped;
  flipped.reserve(n_flip);
  const int k = static_cast<int>(ds.num_classes);
  for (std::size_t i : chosen) {
    const int old = out.labels[i];
    out.labels[i] = (old + 1 + static_cast<int>(rng.next_below(ds.num_classes - 1))) % k;
    flipped.push_back(out.ids[i]);
  }
  std::sort(flipped.begin(), flipped.end());
  return {std::move(out), std::move(flipped)};
}

// Horizontal flip of a row-major h x w image: columns reversed in each row.
inline Vector augment_flip(const Vector& img, std::size_t h, std::size_t w) {
  if (img.size() != h * w) throw DataError("augment_flip: image size mismatch");
  Vector out(img.size());
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = img[r * w + (w - 1 - c)];
  return out;
}

// Quarter-turn counterclockwise; squares only, exact pixel permutation.
inline Vector augment_rot90(const Vector& img, std::size_t h, std::size_t w) {
  if (img.size() != h * w) throw DataError("augment_rot90: image size mismatch");
  if (h != w) throw DataError("augment_rot90: rotation requires a square image");
  Vector out(img.size());
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = img[c * w + (w - 1 - r)];
  return out;
}

// Non-uniform test construction: R rounds of m distinct majority-class
// samples (duplicates allowed across rounds), each copy flipped or rotated
// with equal probability, plus m distinct untouched samples from every other
// class. Tabular data (no image shape) gets additive gaussian jitter with
// sigma = 0.05 * per-feature standard deviation instead; non-square images
// are always flipped.
inline Dataset build_skewed_test(const Dataset& test, int majority_class, std::size_t repeats,
                                 std::size_t per_class, RngStream& rng) {
  if (per_class == 0) throw DataError("build_skewed_test: per_class must be positive");
  if (majority_class < 0 || static_cast<std::size_t>(majority_class) >= test.num_classes)
    throw DataError("build_skewed_test: majority class outside label range");
  std::vector<std::vector<std::size_t>> by_class(test.num_classes);
  for (std::size_t i = 0; i < test.size(); ++i)
    by_class[static_cast<std::size_t>(test.labels[i])].push_back(i);
  if (by_class[static_cast<std::size_t>(majority_class)].empty())
    throw DataError("build_skewed_test: majority class " + std::to_string(majority_class) +
                    " absent from the test set");
  for (std::size_t k = 0; k < test.num_classes; ++k)
    if (by_class[k].size() < per_class)
      throw DataError("build_skewed_test: class " + std::to_string(k) + " has only " +
                      std::to_string(by_class[k].size()) + " samples, need " +
                      std::to_string(per_class));

  // tabular jitter scale, per feature
  Vector sigma;
  const bool image = test.image_shape.has_value();
  if (!image) {
    sigma.assign(test.dim(), 0.0);
    Vector mean(test.dim(), 0.0);
    for (std::size_t i = 0; i < test.size(); ++i)
      for (std::size_t j = 0; j < test.dim(); ++j) mean[j] += test.features(i, j);
    for (double& v : mean) v /= static_cast<double>(test.size());
    for (std::size_t i = 0; i < test.size(); ++i)
      for (std::size_t j = 0; j < test.dim(); ++j) {
        const double d = test.features(i, j) - mean[j];
        sigma[j] += d * d;
      }
    for (double& v : sigma) v = 0.05 * std::sqrt(v / static_cast<double>(test.size()));
  }

  const std::size_t k_minus_1 = test.num_classes - 1;
  Dataset out;
  out.num_classes = test.num_classes;
  out.image_shape = test.image_shape;
  const std::size_t total = repeats * per_class + k_minus_1 * per_class;
  out.features = Matrix(total, test.dim());
  out.labels.resize(total);
  out.ids.resize(total);

  std::size_t row = 0;
  auto emit = [&](const Vector& x, int label) {
    for (std::size_t j = 0; j < test.dim(); ++j) out.features(row, j) = x[j];
    out.labels[row] = label;
    out.ids[row] = static_cast<std::int64_t>(row);
    ++row;
  };

  auto pick_distinct = [&](const std::vector<std::size_t>& pool) {
    std::vector<std::size_t> copy = pool;
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.next_below(copy.size() - i));
      std::swap(copy[i], copy[j]);
    }
    copy.resize(per_class);
    return copy;
  };

  const auto& maj_pool = by_class[static_cast<std::size_t>(majority_class)];
  for (std::size_t rep = 0; rep < repeats; ++rep) {
    for (std::size_t i : pick_distinct(maj_pool)) {
      Vector x(test.dim());
      for (std::size_t j = 0; j < test.dim(); ++j) x[j] = test.features(i, j);
      if (image) {
        const auto [h, w] = *test.image_shape;
        const bool flip = h != w || rng.next_uniform() < 0.5;
        x = flip ? augment_flip(x, h, w) : augment_rot90(x, h, w);
      } else {
        for (std::size_t j = 0; j < test.dim(); ++j) x[j] += sigma[j] * rng.next_normal();
      }
      emit(x, majority_class);
    }
  }
  for (std::size_t k = 0; k < test.num_classes; ++k) {
    if (k == static_cast<std::size_t>(majority_class)) continue;
    for (std::size_t i : pick_distinct(by_class[k])) {
      Vector x(test.dim());
      for (std::size_t j = 0; j < test.dim(); ++j) x[j] = test.features(i, j);
      emit(x, static_cast<int>(k));
    }
  }
  return out;
}

// ---- CSV: header "id,label,f0,...,f{d-1}", shortest round-trip decimals ----

namespace detail {

inline std::string format_double(double v) {
  std::array<char, 32> buf;
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

inline double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw DataError("non-numeric value '" + s + "' at " + where);
  return v;
}

inline std::int64_t parse_int(const std::string& s, const std::string& where) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw DataError("non-integer value '" + s + "' at " + where);
  return v;
}

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

}  // namespace detail

inline std::string csv_to_string(const Dataset& ds) {
  std::string out = "id,label";
  for (std::size_t j = 0; j < ds.dim(); ++j) out += ",f" + std::to_string(j);
  out += '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out += std::to_string(ds.ids[i]);
    out += ',';
    out += std::to_string(ds.labels[i]);
    for (std::size_t j = 0; j < ds.dim(); ++j) {
      out += ',';
      out += detail::format_double(ds.features(i, j));
    }
    out += '\n';
  }
  return out;
}

inline void save_csv(const Dataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::binary);  // binary: byte-identical across platforms
  if (!f) throw DataError("save_csv: cannot open '" + path + "' for writing");
  const std::string text = csv_to_string(ds);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw DataError("save_csv: write failure on '" + path + "'");
}

inline Dataset load_csv(const std::string& path, std::size_t num_classes = 0) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("load_csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw DataError("load_csv: '" + path + "' is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header = detail::split_line(line);
  if (header.size() < 3 || header[0] != "id" || header[1] != "label")
    throw DataError("load_csv: '" + path + "' header must start with id,label,f0,...");
  const std::size_t d = header.size() - 2;

  std::vector<std::int64_t> ids;
  std::vector<int> labels;
  std::vector<double> values;
  std::size_t row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells = detail::split_line(line);
    const std::string where = path + ":" + std::to_string(row);
    if (cells.size() != d + 2)
      throw DataError("load_csv: wrong cell count at " + where + " (got " +
                      std::to_string(cells.size()) + ", want " + std::to_string(d + 2) + ")");
    ids.push_back(detail::parse_int(cells[0], where));
    labels.push_back(static_cast<int>(detail::parse_int(cells[1], where)));
    for (std::size_t j = 0; j < d; ++j)
      values.push_back(detail::parse_double(cells[2 + j], where));
  }
  Dataset ds;
  ds.features = Matrix(ids.size(), d);
  ds.features.data = std::move(values);
  ds.labels = std::move(labels);
  ds.ids = std::move(ids);
  int max_label = -1;
  for (int l : ds.labels) max_label = std::max(max_label, l);
  ds.num_classes = num_classes != 0 ? num_classes : static_cast<std::size_t>(max_label + 1);
  ds.validate();
  return ds;
}

// ---- IDX (big-endian, MNIST convention) ----

namespace detail {

inline std::uint32_t read_u32_be(std::ifstream& f, const std::string& path, std::size_t offset) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4))
    throw DataError("idx: '" + path + "' truncated at byte " + std::to_string(offset));
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

}  // namespace detail

// Images magic 0x00000803 with (count, rows, cols); labels magic 0x00000801
// with (count). Pixels are scaled byte/255 into [0, 1].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw DataError("load_idx: cannot open '" + images_path + "'");
  const std::uint32_t magic_i = detail::read_u32_be(fi, images_path, 0);
  if (magic_i != 0x00000803u)
    throw DataError("load_idx: '" + images_path + "' bad magic at byte 0 (got " +
                    std::to_string(magic_i) + ", want 2051)");
  const std::uint32_t n = detail::read_u32_be(fi, images_path, 4);
  const std::uint32_t rows = detail::read_u32_be(fi, images_path, 8);
  const std::uint32_t cols = detail::read_u32_be(fi, images_path, 12);

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw DataError("load_idx: cannot open '" + labels_path + "'");
  const std::uint32_t magic_l = detail::read_u32_be(fl, labels_path, 0);
  if (magic_l != 0x00000801u)
    throw DataError("load_idx: '" + labels_path + "' bad magic at byte 0 (got " +
                    std::to_string(magic_l) + ", want 2049)");
  const std::uint32_t n_labels = detail::read_u32_be(fl, labels_path, 4);
  if (n != n_labels)
    throw DataError("load_idx: image count " + std::to_string(n) + " != label count " +
                    std::to_string(n_labels));

  const std::size_t d = static_cast<std::size_t>(rows) * cols;
  Dataset ds;
  ds.features = Matrix(n, d);
  ds.labels.resize(n);
  ds.ids.resize(n);
  ds.image_shape = {{rows, cols}};
  std::vector<unsigned char> pix(d);
  int max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    if (!fi.read(reinterpret_cast<char*>(pix.data()), static_cast<std::streamsize>(d)))
      throw DataError("load_idx: '" + images_path + "' truncated at image " + std::to_string(i) +
                      " (byte " + std::to_string(16 + std::size_t(i) * d) + ")");
    for (std::size_t j = 0; j < d; ++j)
      ds.features(i, j) = static_cast<double>(pix[j]) / 255.0;
    char lb;
    if (!fl.read(&lb, 1))
      throw DataError("load_idx: '" + labels_path + "' truncated at label " + std::to_string(i));
    ds.labels[i] = static_cast<unsigned char>(lb);
    max_label = std::max(max_label, ds.labels[i]);
    ds.ids[i] = static_cast<std::int64_t>(i);
  }
  ds.num_classes = static_cast<std::size_t>(max_label + 1);
  ds.validate();
  return ds;
}

}  // namespace ibtl
