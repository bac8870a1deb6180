#include "tlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace fs = std::filesystem;

namespace tlab {

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(ParseErrc::missing_file, path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

uint32_t be32(const unsigned char* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void write_be32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

unsigned char quantize(double v) {
  long q = std::lround(v * 255.0);
  return static_cast<unsigned char>(std::clamp(q, 0l, 255l));
}

constexpr uint32_t kIdxImagesMagic = 2051;
constexpr uint32_t kIdxLabelsMagic = 2049;

}  // namespace

// --- IDX -------------------------------------------------------------------

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  auto img = read_file(images_path);
  if (img.size() < 16) throw DataError(ParseErrc::truncated_file, images_path + ": header");
  if (be32(img.data()) != kIdxImagesMagic)
    throw DataError(ParseErrc::bad_magic,
                    images_path + ": got " + std::to_string(be32(img.data())) + ", want 2051");
  uint32_t n = be32(img.data() + 4), rows = be32(img.data() + 8), cols = be32(img.data() + 12);
  size_t want = 16 + size_t(n) * rows * cols;
  if (img.size() < want)
    throw DataError(ParseErrc::truncated_file,
                    images_path + ": " + std::to_string(img.size()) + " bytes, want " +
                        std::to_string(want));
  if (img.size() > want)
    throw DataError(ParseErrc::trailing_bytes,
                    images_path + ": " + std::to_string(img.size() - want) + " extra bytes");

  auto lab = read_file(labels_path);
  if (lab.size() < 8) throw DataError(ParseErrc::truncated_file, labels_path + ": header");
  if (be32(lab.data()) != kIdxLabelsMagic)
    throw DataError(ParseErrc::bad_magic,
                    labels_path + ": got " + std::to_string(be32(lab.data())) + ", want 2049");
  uint32_t nl = be32(lab.data() + 4);
  if (nl != n)
    throw DataError(ParseErrc::count_mismatch, labels_path + " has " + std::to_string(nl) +
                                                   " labels for " + std::to_string(n) + " images");
  size_t lwant = 8 + size_t(nl);
  if (lab.size() < lwant) throw DataError(ParseErrc::truncated_file, labels_path);
  if (lab.size() > lwant)
    throw DataError(ParseErrc::trailing_bytes,
                    labels_path + ": " + std::to_string(lab.size() - lwant) + " extra bytes");

  LabeledDataset ds;
  ds.name = fs::path(images_path).filename().string();
  ds.image_shape = {1, int(rows), int(cols)};
  long d = long(rows) * cols;
  ds.images.resize(long(n), d);
  const unsigned char* px = img.data() + 16;
  for (long i = 0; i < long(n); ++i)
    for (long j = 0; j < d; ++j) ds.images(i, j) = double(px[i * d + j]) / 255.0;
  ds.labels.resize(n);
  int maxlab = 0;
  for (long i = 0; i < long(n); ++i) {
    ds.labels[size_t(i)] = lab[8 + size_t(i)];
    maxlab = std::max(maxlab, ds.labels[size_t(i)]);
  }
  ds.num_classes = n ? maxlab + 1 : 0;
  return ds;
}

void save_idx(const LabeledDataset& ds, const std::string& images_path,
              const std::string& labels_path) {
  if (ds.image_shape.size() != 3 || ds.image_shape[0] != 1)
    throw ConfigError("save_idx: expects single-channel {1,H,W} images, got " +
                      shape_str(ds.image_shape));
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw DataError(ParseErrc::missing_file, "cannot write " + images_path);
  write_be32(img, kIdxImagesMagic);
  write_be32(img, uint32_t(ds.size()));
  write_be32(img, uint32_t(ds.image_shape[1]));
  write_be32(img, uint32_t(ds.image_shape[2]));
  for (long i = 0; i < ds.size(); ++i)
    for (long j = 0; j < ds.dim(); ++j) {
      unsigned char b = quantize(ds.images(i, j));
      img.write(reinterpret_cast<const char*>(&b), 1);
    }
  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw DataError(ParseErrc::missing_file, "cannot write " + labels_path);
  write_be32(lab, kIdxLabelsMagic);
  write_be32(lab, uint32_t(ds.size()));
  for (int y : ds.labels) {
    unsigned char b = static_cast<unsigned char>(y);
    lab.write(reinterpret_cast<const char*>(&b), 1);
  }
}

// --- CIFAR -----------------------------------------------------------------

LabeledDataset load_cifar(const std::vector<std::string>& batch_paths, bool fine_labels) {
  const size_t record = fine_labels ? 3074 : 3073;
  const int classes = fine_labels ? 100 : 10;
  LabeledDataset ds;
  ds.image_shape = {3, 32, 32};
  ds.num_classes = classes;
  std::vector<std::vector<unsigned char>> blobs;
  size_t total = 0;
  for (const auto& p : batch_paths) {
    auto bytes = read_file(p);
    if (bytes.empty() || bytes.size() % record != 0)
      throw DataError(ParseErrc::wrong_record_size,
                      p + ": " + std::to_string(bytes.size()) + " bytes is not a multiple of " +
                          std::to_string(record));
    total += bytes.size() / record;
    blobs.push_back(std::move(bytes));
  }
  ds.images.resize(long(total), 3072);
  ds.labels.resize(total);
  long row = 0;
  for (size_t bi = 0; bi < blobs.size(); ++bi) {
    const auto& bytes = blobs[bi];
    long n = long(bytes.size() / record);
    for (long i = 0; i < n; ++i, ++row) {
      const unsigned char* rec = bytes.data() + size_t(i) * record;
      int label = fine_labels ? rec[1] : rec[0];
      if (label >= classes)
        throw DataError(ParseErrc::label_out_of_range,
                        batch_paths[bi] + ": label " + std::to_string(label) + " >= " +
                            std::to_string(classes));
      ds.labels[size_t(row)] = label;
      const unsigned char* px = rec + (fine_labels ? 2 : 1);
      for (long j = 0; j < 3072; ++j) ds.images(row, j) = double(px[j]) / 255.0;
    }
  }
  ds.name = batch_paths.empty() ? "cifar" : fs::path(batch_paths.front()).filename().string();
  return ds;
}

void save_cifar(const LabeledDataset& ds, const std::string& path, bool fine_labels) {
  if (ds.image_shape != Shape{3, 32, 32})
    throw ConfigError("save_cifar: expects {3,32,32} images, got " + shape_str(ds.image_shape));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(ParseErrc::missing_file, "cannot write " + path);
  for (long i = 0; i < ds.size(); ++i) {
    unsigned char y = static_cast<unsigned char>(ds.labels[size_t(i)]);
    if (fine_labels) {
      unsigned char coarse = static_cast<unsigned char>(ds.labels[size_t(i)] / 5);
      out.write(reinterpret_cast<const char*>(&coarse), 1);
    }
    out.write(reinterpret_cast<const char*>(&y), 1);
    for (long j = 0; j < 3072; ++j) {
      unsigned char b = quantize(ds.images(i, j));
      out.write(reinterpret_cast<const char*>(&b), 1);
    }
  }
}

// --- directory conventions -------------------------------------------------

DatasetFormat parse_dataset_format(const std::string& id) {
  if (id == "mnist") return DatasetFormat::mnist;
  if (id == "fashion_mnist" || id == "fashion-mnist") return DatasetFormat::fashion_mnist;
  if (id == "cifar10" || id == "cifar-10") return DatasetFormat::cifar10;
  if (id == "cifar100" || id == "cifar-100") return DatasetFormat::cifar100;
  throw ConfigError("unknown dataset format: '" + id + "'");
}

const char* to_string(DatasetFormat f) {
  switch (f) {
    case DatasetFormat::mnist: return "mnist";
    case DatasetFormat::fashion_mnist: return "fashion_mnist";
    case DatasetFormat::cifar10: return "cifar10";
    case DatasetFormat::cifar100: return "cifar100";
  }
  return "?";
}

TrainTestPair load_dataset_dir(const std::string& dir, DatasetFormat format) {
  TrainTestPair out;
  auto j = [&dir](const char* f) { return (fs::path(dir) / f).string(); };
  switch (format) {
    case DatasetFormat::mnist:
    case DatasetFormat::fashion_mnist:
      out.train = load_idx(j("train-images-idx3-ubyte"), j("train-labels-idx1-ubyte"));
      out.test = load_idx(j("t10k-images-idx3-ubyte"), j("t10k-labels-idx1-ubyte"));
      break;
    case DatasetFormat::cifar10: {
      std::vector<std::string> batches;
      for (int i = 1; i <= 5; ++i)
        batches.push_back(j(("data_batch_" + std::to_string(i) + ".bin").c_str()));
      out.train = load_cifar(batches, false);
      out.test = load_cifar({j("test_batch.bin")}, false);
      break;
    }
    case DatasetFormat::cifar100:
      out.train = load_cifar({j("train.bin")}, true);
      out.test = load_cifar({j("test.bin")}, true);
      break;
  }
  out.train.name = std::string(to_string(format)) + "-train";
  out.test.name = std::string(to_string(format)) + "-test";
  return out;
}

// --- subsets and splits ----------------------------------------------------

LabeledDataset subset(const LabeledDataset& ds, const std::vector<int>& idx) {
  LabeledDataset out;
  out.name = ds.name;
  out.image_shape = ds.image_shape;
  out.num_classes = ds.num_classes;
  out.images.resize(long(idx.size()), ds.dim());
  out.labels.resize(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    int src = idx[i];
    if (src < 0 || src >= ds.size())
      throw ConfigError("subset: index " + std::to_string(src) + " out of range for " +
                        std::to_string(ds.size()) + " examples");
    out.images.row(long(i)) = ds.images.row(src);
    out.labels[i] = ds.labels[size_t(src)];
  }
  return out;
}

SplitIndices partition_indices(long n, long n_train, long n_attack, uint64_t seed) {
  if (n_train + n_attack > n)
    throw ConfigError("partition_indices: " + std::to_string(n_train) + " train + " +
                      std::to_string(n_attack) + " attack exceeds " + std::to_string(n) +
                      " examples");
  Prng g(seed, "dataset-partition");
  auto perm = g.permutation(n);
  SplitIndices out;
  out.train.assign(perm.begin(), perm.begin() + n_train);
  out.attack.assign(perm.end() - n_attack, perm.end());
  return out;
}

// --- blob fixture ----------------------------------------------------------

namespace {

struct Bump {
  double cx, cy, amp, sigma;
  Vec channel_scale;  // per-channel multiplier
};

std::vector<Bump> class_template(const BlobSpec& spec, uint64_t seed, int cls) {
  Prng g = Prng(seed, "blob-class").fork("class", uint64_t(cls));
  std::vector<Bump> bumps;
  // Keep bump centers away from the border so shifts don't clip them, but
  // leave enough spread for classes to be distinguishable on small canvases.
  double margin = std::min(4.0, 0.2 * std::min(spec.height, spec.width));
  for (int b = 0; b < spec.bumps_per_class; ++b) {
    Bump bump;
    bump.cx = g.uniform(margin, spec.width - margin);
    bump.cy = g.uniform(margin, spec.height - margin);
    bump.amp = g.uniform(spec.amp_lo, spec.amp_hi);
    bump.sigma = g.uniform(spec.sigma_lo, spec.sigma_hi);
    bump.channel_scale = Vec(spec.channels);
    for (int c = 0; c < spec.channels; ++c) bump.channel_scale[c] = g.uniform(0.4, 1.0);
    bumps.push_back(bump);
  }
  return bumps;
}

}  // namespace

LabeledDataset make_blob_dataset(const BlobSpec& spec, long n, uint64_t seed,
                                 const std::string& name, uint64_t sample_stream) {
  LabeledDataset ds;
  ds.name = name;
  ds.image_shape = {spec.channels, spec.height, spec.width};
  ds.num_classes = spec.num_classes;
  long dim = long(spec.channels) * spec.height * spec.width;
  ds.images.resize(n, dim);
  ds.labels.resize(size_t(n));

  std::vector<std::vector<Bump>> templates;
  for (int c = 0; c < spec.num_classes; ++c) templates.push_back(class_template(spec, seed, c));

  Prng order = Prng(seed, "blob-order").fork("stream", sample_stream);
  auto label_perm = order.permutation(n);
  long plane = long(spec.height) * spec.width;
  for (long i = 0; i < n; ++i) {
    int cls = label_perm[size_t(i)] % spec.num_classes;  // balanced, shuffled
    ds.labels[size_t(i)] = cls;
    Prng g = Prng(seed, "blob-sample").fork("stream", sample_stream).fork("sample", uint64_t(i));
    double dx = double(g.next_below(2 * spec.max_shift + 1) - spec.max_shift);
    double dy = double(g.next_below(2 * spec.max_shift + 1) - spec.max_shift);
    double ascale = g.uniform(1.0 - spec.amp_jitter, 1.0 + spec.amp_jitter);
    auto row = ds.images.row(i);
    row.setZero();
    for (const Bump& bump : templates[size_t(cls)]) {
      double cx = bump.cx + dx, cy = bump.cy + dy;
      double inv = 1.0 / (2.0 * bump.sigma * bump.sigma);
      for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x) {
          double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          if (d2 > 9.0 * bump.sigma * bump.sigma) continue;
          double v = bump.amp * ascale * std::exp(-d2 * inv);
          for (int c = 0; c < spec.channels; ++c)
            row[c * plane + y * spec.width + x] += bump.channel_scale[c] * v;
        }
    }
    for (long j = 0; j < dim; ++j) {
      double v = row[j] + spec.noise * g.normal();
      row[j] = std::clamp(v, 0.0, 1.0);
    }
  }
  return ds;
}

void write_blob_dataset_dir(const std::string& dir, DatasetFormat format, const BlobSpec& spec,
                            long n_train, long n_test, uint64_t seed) {
  fs::create_directories(dir);
  LabeledDataset train = make_blob_dataset(spec, n_train, seed, "train", 0);
  LabeledDataset test = make_blob_dataset(spec, n_test, seed, "test", 1);
  auto j = [&dir](const std::string& f) { return (fs::path(dir) / f).string(); };
  switch (format) {
    case DatasetFormat::mnist:
    case DatasetFormat::fashion_mnist:
      save_idx(train, j("train-images-idx3-ubyte"), j("train-labels-idx1-ubyte"));
      save_idx(test, j("t10k-images-idx3-ubyte"), j("t10k-labels-idx1-ubyte"));
      break;
    case DatasetFormat::cifar10: {
      long per = (n_train + 4) / 5;
      for (int b = 0; b < 5; ++b) {
        long lo = b * per, hi = std::min(n_train, lo + per);
        std::vector<int> idx;
        for (long i = lo; i < hi; ++i) idx.push_back(int(i));
        save_cifar(subset(train, idx), j("data_batch_" + std::to_string(b + 1) + ".bin"), false);
      }
      save_cifar(test, j("test_batch.bin"), false);
      break;
    }
    case DatasetFormat::cifar100:
      save_cifar(train, j("train.bin"), true);
      save_cifar(test, j("test.bin"), true);
      break;
  }
}

// --- regression fixture ----------------------------------------------------

double RegressionProblem::g(const Vec& x) const {
  double out = 0;
  for (size_t j = 0; j < w.size(); ++j) out += a[long(j)] * std::cos(w[j].dot(x) + b[long(j)]);
  return out;
}

double RegressionProblem::sample_y(const Vec& x, Prng& noise_stream) const {
  return g(x) + std::sqrt(eta2) * noise_stream.normal();
}

Vec RegressionProblem::sample_x(Prng& stream) const {
  Vec x(dim);
  for (int i = 0; i < dim; ++i) x[i] = stream.uniform(-1.0, 1.0);
  return x;
}

RegressionProblem make_regression(int dim, int terms, double eta2, uint64_t seed) {
  RegressionProblem p;
  p.dim = dim;
  p.eta2 = eta2;
  Prng g(seed, "regression-truth");
  p.a = Vec(terms);
  p.b = Vec(terms);
  for (int j = 0; j < terms; ++j) {
    Vec wj(dim);
    for (int i = 0; i < dim; ++i) wj[i] = g.uniform(-2.0, 2.0);
    p.w.push_back(wj);
    p.a[j] = g.uniform(-1.0, 1.0);
    p.b[j] = g.uniform(0.0, 6.283185307179586);
  }
  return p;
}

}  // namespace tlab
