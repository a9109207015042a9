#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gsqa/regioning.hpp"

namespace gsqa::net {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct NetConfig {
  std::size_t d = 128;        // token width
  std::size_t heads = 4;      // GAT heads; must divide d
  std::size_t ffn_mult = 4;   // FFN expansion factor
  std::size_t k_g = 8;        // region-graph degree before symmetrization
  std::size_t blocks = 3;     // cascaded GAT blocks
  // Express member centroids relative to their region center before encoding.
  bool relative_centroids = true;

  bool operator==(const NetConfig&) const = default;
};

struct InitOptions {
  // Zero the final projections of M and F in every block (identity blocks).
  bool zero_residual_branches = false;
  bool zero_head = false;
  // The pooling query W_q is zero unless this is set (uniform initial pooling).
  bool random_pool_query = false;
};

struct Tensor {
  std::string name;
  Mat value;
  Mat grad;
  bool trainable = true;
};

class ModelParams {
 public:
  static ModelParams create(const NetConfig& config, std::uint64_t seed,
                            const InitOptions& init = {});

  const NetConfig& config() const { return config_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  // Trainable scalar count.
  std::size_t parameter_count() const;
  void zero_grad();

  // Bumped by every optimizer update; caches from older versions are stale.
  std::uint64_t version() const { return version_; }
  void bump_version() { ++version_; }

  // Human-readable shapes and parameter count.
  std::string describe() const;

 private:
  NetConfig config_;
  std::vector<Tensor> tensors_;
  std::uint64_t version_ = 0;
};

std::size_t parameter_count(const NetConfig& config);

// Region graph over n nodes in CSR form: rows sorted ascending, self included.
struct Adjacency {
  std::vector<std::size_t> offsets;  // n + 1
  std::vector<std::uint32_t> cols;

  std::size_t nodes() const { return offsets.empty() ? 0 : offsets.size() - 1; }
  std::size_t degree(std::size_t i) const { return offsets[i + 1] - offsets[i]; }
};

// k_g nearest centers (self included), symmetrized by union.
Adjacency region_graph(const std::vector<GroupingPoint>& centers, std::size_t k_g);
Adjacency adjacency_from_lists(const std::vector<std::vector<std::uint32_t>>& lists);

struct TokenGrid {
  Mat tokens;  // n x d (H0)
  Adjacency adjacency;
};

// Encoder input rows (n*k x 59): optional relative centroids then the fitted
// per-attribute normalization.
Mat encoder_input(const RegionBatch& batch, const ModelParams& params);

// Fits encoder.input_shift / encoder.input_scale to the mean and inverse
// standard deviation of encoder inputs over `batches`.
void fit_input_normalization(ModelParams& params, const std::vector<const RegionBatch*>& batches);

struct EncoderCache {
  Mat x, a1, u1;
  std::vector<std::uint32_t> argmax;  // n x d member index of each max
  std::size_t n = 0, k = 0;
};

TokenGrid encode_regions(const RegionBatch& batch, const ModelParams& params,
                         EncoderCache* cache = nullptr);

struct GatCache {
  Mat h_in, xhat1, z1, p, o, h1, xhat2, z2, f1, g;
  Eigen::VectorXd rstd1, rstd2;
  // Per head, per CSR edge.
  std::vector<std::vector<double>> pre_activation, alpha;
};

Mat gat_block(const Mat& h_in, const Adjacency& adj, const ModelParams& params,
              std::size_t block, GatCache* cache = nullptr);

struct PoolResult {
  Mat feature;  // 1 x d
  Eigen::VectorXd alphas;
};

struct PoolCache {
  Mat h, a, u;
  Eigen::VectorXd alphas;
};

PoolResult attention_pool(const Mat& h, const ModelParams& params, PoolCache* cache = nullptr);

struct ForwardCache {
  std::uint64_t params_version = 0;
  const ModelParams* owner = nullptr;
  bool from_tokens = false;
  EncoderCache encoder;
  Adjacency adjacency;
  std::vector<GatCache> blocks;
  PoolCache pool;
  Mat feature;
  double score = 0.0;
  bool valid = false;
};

double forward(const ModelParams& params, const RegionBatch& batch, ForwardCache* cache = nullptr);

// Entry point for externally supplied region tokens (e.g. a pretrained
// encoder); skips the built-in encoder.
double forward_tokens(const ModelParams& params, const TokenGrid& grid,
                      ForwardCache* cache = nullptr);

// External region tokens (n x d float64), e.g. from a pretrained encoder.
// Container, little-endian: "GSTK" magic, u32 version (1), u32 n, u32 d,
// then n*d float64 row-major. The adjacency comes from the batch's centers.
Mat read_tokens(const std::filesystem::path& path);
void write_tokens(const Mat& tokens, const std::filesystem::path& path);
TokenGrid token_grid(Mat tokens, const RegionBatch& batch, std::size_t k_g);

// Accumulates d(score)/d(theta) * upstream into every trainable tensor's
// grad. Optionally returns the gradient with respect to H0.
void backward(ModelParams& params, const ForwardCache& cache, double upstream,
              Mat* d_tokens = nullptr);

// Per-op backward passes; gradients are accumulated into params.
Mat gat_block_backward(ModelParams& params, std::size_t block, const Adjacency& adj,
                       const GatCache& cache, const Mat& d_out);
Mat attention_pool_backward(ModelParams& params, const PoolCache& cache, const Mat& d_feature);

// Cache-free inference in the requested precision; independent of the
// training path above.
template <typename Scalar>
double predict(const ModelParams& params, const RegionBatch& batch);

double gelu(double x);
double gelu_grad(double x);

// Checkpoint container, little-endian: "GSQACKPT" magic, u32 version, u32
// tensor count, then per tensor: u32 name length, name bytes, u32 flags
// (bit 0 = trainable), u64 rows, u64 cols, rows*cols float64. A JSON sidecar
// (<path>.json) carries the hyperparameters and any caller metadata.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path,
                     const std::string& sidecar_json);
ModelParams load_checkpoint(const std::filesystem::path& path, std::string* sidecar_json = nullptr);

std::string config_to_json(const NetConfig& config);
NetConfig config_from_json(const std::string& text);

}  // namespace gsqa::net
