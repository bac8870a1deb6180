#pragma once

#include "tlab/common.hpp"
#include "tlab/rng.hpp"

#include <string>
#include <vector>

namespace tlab {

// ---------------------------------------------------------------------------
// Dataset ingest and synthetic fixtures.
//
// Images live in memory as doubles in [0,1], one flat row per example in
// channel-major (C,H,W) order.  On disk we speak the two classic formats:
// big-endian IDX pairs (images magic 2051, labels magic 2049) and the CIFAR
// binary batch layout (one label byte -- or coarse+fine pair -- followed by
// 3072 channel-major pixel bytes per record).  Loading is strict: every
// malformed input maps to a typed DataError, and save->load round-trips are
// byte-identical.
// ---------------------------------------------------------------------------

struct LabeledDataset {
  std::string name;
  Shape image_shape;        ///< {C,H,W}
  RMat images;              ///< [n, C*H*W], values in [0,1]
  std::vector<int> labels;
  int num_classes = 0;

  long size() const { return images.rows(); }
  long dim() const { return images.cols(); }
};

// --- IDX -------------------------------------------------------------------

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path);
void save_idx(const LabeledDataset& ds, const std::string& images_path,
              const std::string& labels_path);

// --- CIFAR binary batches --------------------------------------------------

/// Concatenates the given batch files.  fine_labels selects the two-byte
/// (coarse, fine) record head; the fine label is kept.
LabeledDataset load_cifar(const std::vector<std::string>& batch_paths, bool fine_labels);
void save_cifar(const LabeledDataset& ds, const std::string& path, bool fine_labels);

// --- directory conventions -------------------------------------------------

enum class DatasetFormat { mnist, fashion_mnist, cifar10, cifar100 };

DatasetFormat parse_dataset_format(const std::string& id);
const char* to_string(DatasetFormat f);

struct TrainTestPair {
  LabeledDataset train, test;
};

/// Loads train/test files from a directory laid out like the published
/// archives (train-images-idx3-ubyte, ..., or data_batch_1.bin, ...).
TrainTestPair load_dataset_dir(const std::string& dir, DatasetFormat format);

// --- subsets and splits ----------------------------------------------------

LabeledDataset subset(const LabeledDataset& ds, const std::vector<int>& idx);

struct SplitIndices {
  std::vector<int> train;   ///< training subsample
  std::vector<int> attack;  ///< attack pool (disjoint from train)
};

/// One seed-keyed permutation; training indices from the front, attack pool
/// from the back.  Disjoint by construction.
SplitIndices partition_indices(long n, long n_train, long n_attack, uint64_t seed);

// --- synthetic image fixture -----------------------------------------------

/// Class-conditional random bump templates with per-sample jitter.  Written
/// through save_idx/save_cifar these files are format-identical to the real
/// archives, so the full ingest -> train -> attack pipeline runs on them.
struct BlobSpec {
  int num_classes = 10;
  int channels = 1;
  int height = 28;
  int width = 28;
  int bumps_per_class = 4;
  double amp_lo = 0.55, amp_hi = 0.95;      ///< bump peak range
  double sigma_lo = 2.0, sigma_hi = 3.5;    ///< bump width range (pixels)
  int max_shift = 2;                        ///< per-sample integer jitter
  double amp_jitter = 0.15;                 ///< per-sample amplitude scale +/-
  double noise = 0.10;                      ///< per-pixel Gaussian sigma
};

/// `sample_stream` selects an independent draw of per-sample jitter while
/// keeping the class templates fixed; train/test splits of one fixture share
/// a seed and differ only in stream.
LabeledDataset make_blob_dataset(const BlobSpec& spec, long n, uint64_t seed,
                                 const std::string& name, uint64_t sample_stream = 0);

/// Generates train+test fixtures and writes them in the directory layout of
/// `format` (IDX pair files or CIFAR batches).
void write_blob_dataset_dir(const std::string& dir, DatasetFormat format, const BlobSpec& spec,
                            long n_train, long n_test, uint64_t seed);

// --- synthetic regression fixture ------------------------------------------

/// Ground truth g(x) = sum_j a_j cos(<w_j, x> + b_j), observations
/// y = g(x) + N(0, eta2).  Used to validate the noise-aware risk
/// decomposition against Monte-Carlo estimates.
struct RegressionProblem {
  int dim = 0;
  double eta2 = 0.0;
  std::vector<Vec> w;
  Vec a, b;

  double g(const Vec& x) const;
  double sample_y(const Vec& x, Prng& noise_stream) const;
  Vec sample_x(Prng& stream) const;
};

RegressionProblem make_regression(int dim, int terms, double eta2, uint64_t seed);

}  // namespace tlab
