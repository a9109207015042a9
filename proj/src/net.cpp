#include "gsqa/net.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "gsqa/error.hpp"
#include "gsqa/rng.hpp"
#include "json.hpp"

namespace gsqa::net {
namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kLeakySlope = 0.2;
constexpr std::uint64_t kInitStreamBase = 1000;

struct Shape {
  std::string name;
  std::size_t rows, cols;
  bool trainable;
  enum class Init { kZero, kOne, kFanIn, kAttention } init;
};

std::string block_name(std::size_t b, const char* leaf) {
  return "gat" + std::to_string(b) + "." + leaf;
}

std::vector<Shape> tensor_shapes(const NetConfig& c) {
  require(c.d >= 1 && c.heads >= 1 && c.d % c.heads == 0, ErrorKind::kConfig,
          "token width must be a positive multiple of the head count");
  require(c.ffn_mult >= 1 && c.k_g >= 1, ErrorKind::kConfig, "invalid network hyperparameters");
  using I = Shape::Init;
  const std::size_t d = c.d;
  const std::size_t hd = d / c.heads;
  const std::size_t f = c.ffn_mult * d;
  std::vector<Shape> s;
  s.push_back({"encoder.input_shift", 1, kSplatAttributes, false, I::kZero});
  s.push_back({"encoder.input_scale", 1, kSplatAttributes, false, I::kOne});
  s.push_back({"encoder.fc1.weight", kSplatAttributes, d, true, I::kFanIn});
  s.push_back({"encoder.fc1.bias", 1, d, true, I::kZero});
  s.push_back({"encoder.fc2.weight", d, d, true, I::kFanIn});
  s.push_back({"encoder.fc2.bias", 1, d, true, I::kZero});
  for (std::size_t b = 0; b < c.blocks; ++b) {
    s.push_back({block_name(b, "ln1.gain"), 1, d, true, I::kOne});
    s.push_back({block_name(b, "ln1.bias"), 1, d, true, I::kZero});
    s.push_back({block_name(b, "attn.weight"), d, d, true, I::kFanIn});
    s.push_back({block_name(b, "attn.a_src"), c.heads, hd, true, I::kAttention});
    s.push_back({block_name(b, "attn.a_dst"), c.heads, hd, true, I::kAttention});
    s.push_back({block_name(b, "attn.proj.weight"), d, d, true, I::kFanIn});
    s.push_back({block_name(b, "attn.proj.bias"), 1, d, true, I::kZero});
    s.push_back({block_name(b, "ln2.gain"), 1, d, true, I::kOne});
    s.push_back({block_name(b, "ln2.bias"), 1, d, true, I::kZero});
    s.push_back({block_name(b, "ffn.fc1.weight"), d, f, true, I::kFanIn});
    s.push_back({block_name(b, "ffn.fc1.bias"), 1, f, true, I::kZero});
    s.push_back({block_name(b, "ffn.fc2.weight"), f, d, true, I::kFanIn});
    s.push_back({block_name(b, "ffn.fc2.bias"), 1, d, true, I::kZero});
  }
  s.push_back({"pool.w_e", d, 2 * d, true, I::kFanIn});
  s.push_back({"pool.w_q", 2 * d, 1, true, I::kZero});
  s.push_back({"head.weight", d, 1, true, I::kFanIn});
  s.push_back({"head.bias", 1, 1, true, I::kZero});
  return s;
}

void fill_uniform(Mat& m, double bound, Rng& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = (2.0 * rng.uniform() - 1.0) * bound;
  }
}

Mat colsum(const Mat& m) { return m.colwise().sum(); }

Mat gelu_of(const Mat& m) { return m.unaryExpr([](double x) { return gelu(x); }); }
Mat gelu_grad_of(const Mat& m) { return m.unaryExpr([](double x) { return gelu_grad(x); }); }

struct LayerNormOut {
  Mat xhat;
  Eigen::VectorXd rstd;
  Mat z;
};

LayerNormOut layer_norm(const Mat& x, const Mat& gain, const Mat& bias) {
  const auto n = x.rows();
  const auto d = static_cast<double>(x.cols());
  LayerNormOut out;
  out.xhat.resize(n, x.cols());
  out.rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).sum() / d;
    const double var = (x.row(i).array() - mean).square().sum() / d;
    out.rstd(i) = 1.0 / std::sqrt(var + kLayerNormEps);
    out.xhat.row(i) = (x.row(i).array() - mean) * out.rstd(i);
  }
  out.z = (out.xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
  return out;
}

Mat layer_norm_backward(const Mat& dz, const Mat& xhat, const Eigen::VectorXd& rstd,
                        Tensor& gain, Tensor& bias) {
  gain.grad.row(0) += (dz.array() * xhat.array()).colwise().sum().matrix();
  bias.grad.row(0) += dz.colwise().sum();
  const Mat dxhat = dz.array().rowwise() * gain.value.row(0).array();
  const auto d = static_cast<double>(dz.cols());
  Mat dx(dz.rows(), dz.cols());
  for (Eigen::Index i = 0; i < dz.rows(); ++i) {
    const double sum_d = dxhat.row(i).sum();
    const double sum_dx = dxhat.row(i).dot(xhat.row(i));
    dx.row(i) = (rstd(i) / d) *
                (d * dxhat.row(i).array() - sum_d - xhat.row(i).array() * sum_dx).matrix();
  }
  return dx;
}

void check_batch(const RegionBatch& batch) {
  const auto& p = batch.params;
  require(p.n >= 1 && p.k >= 1, ErrorKind::kContract, "region batch must be non-empty");
  require(batch.neighbors.size() == p.n * p.k &&
              batch.embeddings.size() == p.n * p.k * kSplatAttributes,
          ErrorKind::kContract, "region batch shapes are inconsistent with (n, k)");
}

std::vector<GroupingPoint> center_points(const RegionBatch& batch) {
  std::vector<GroupingPoint> centers;
  centers.reserve(batch.regions());
  for (std::size_t i = 0; i < batch.regions(); ++i) {
    centers.push_back(grouping_point(batch.embedding(i, 0)));
  }
  return centers;
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

// ---------------------------------------------------------------------------
// Parameters

ModelParams ModelParams::create(const NetConfig& config, std::uint64_t seed,
                                const InitOptions& init) {
  ModelParams p;
  p.config_ = config;
  const auto shapes = tensor_shapes(config);
  for (std::size_t t = 0; t < shapes.size(); ++t) {
    const auto& s = shapes[t];
    Tensor tensor;
    tensor.name = s.name;
    tensor.trainable = s.trainable;
    tensor.value = Mat::Zero(static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
    tensor.grad = Mat::Zero(tensor.value.rows(), tensor.value.cols());
    Rng rng(seed, kInitStreamBase + t);
    switch (s.init) {
      case Shape::Init::kZero: break;
      case Shape::Init::kOne: tensor.value.setOnes(); break;
      case Shape::Init::kFanIn:
        fill_uniform(tensor.value, 1.0 / std::sqrt(static_cast<double>(s.rows)), rng);
        break;
      case Shape::Init::kAttention:
        fill_uniform(tensor.value, 1.0 / std::sqrt(static_cast<double>(s.cols)), rng);
        break;
    }
    p.tensors_.push_back(std::move(tensor));
  }
  if (init.random_pool_query) {
    Rng rng(seed, kInitStreamBase + shapes.size());
    auto& wq = p.at("pool.w_q").value;
    fill_uniform(wq, 1.0 / std::sqrt(static_cast<double>(wq.rows())), rng);
  }
  if (init.zero_residual_branches) {
    for (std::size_t b = 0; b < config.blocks; ++b) {
      p.at(block_name(b, "attn.proj.weight")).value.setZero();
      p.at(block_name(b, "ffn.fc2.weight")).value.setZero();
    }
  }
  if (init.zero_head) p.at("head.weight").value.setZero();
  return p;
}

Tensor& ModelParams::at(const std::string& name) {
  for (auto& t : tensors_) {
    if (t.name == name) return t;
  }
  fail(ErrorKind::kContract, "unknown parameter tensor '" + name + "'");
}

const Tensor& ModelParams::at(const std::string& name) const {
  return const_cast<ModelParams*>(this)->at(name);
}

bool ModelParams::contains(const std::string& name) const {
  return std::any_of(tensors_.begin(), tensors_.end(),
                     [&](const Tensor& t) { return t.name == name; });
}

std::size_t ModelParams::parameter_count() const {
  std::size_t count = 0;
  for (const auto& t : tensors_) {
    if (t.trainable) count += static_cast<std::size_t>(t.value.size());
  }
  return count;
}

std::size_t parameter_count(const NetConfig& config) {
  std::size_t count = 0;
  for (const auto& s : tensor_shapes(config)) {
    if (s.trainable) count += s.rows * s.cols;
  }
  return count;
}

void ModelParams::zero_grad() {
  for (auto& t : tensors_) t.grad.setZero();
}

std::string ModelParams::describe() const {
  std::ostringstream out;
  out << "GSOQA network: d=" << config_.d << " heads=" << config_.heads
      << " ffn_mult=" << config_.ffn_mult << " k_g=" << config_.k_g
      << " blocks=" << config_.blocks << "\n";
  for (const auto& t : tensors_) {
    out << "  " << t.name << " [" << t.value.rows() << " x " << t.value.cols() << "]"
        << (t.trainable ? "" : " (buffer)") << "\n";
  }
  out << "trainable parameters: " << parameter_count() << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Graph and encoder

Adjacency adjacency_from_lists(const std::vector<std::vector<std::uint32_t>>& lists) {
  Adjacency adj;
  adj.offsets.push_back(0);
  for (std::size_t i = 0; i < lists.size(); ++i) {
    auto row = lists[i];
    row.push_back(static_cast<std::uint32_t>(i));
    std::sort(row.begin(), row.end());
    row.erase(std::unique(row.begin(), row.end()), row.end());
    for (const auto j : row) {
      require(j < lists.size(), ErrorKind::kContract, "adjacency index out of range");
    }
    adj.cols.insert(adj.cols.end(), row.begin(), row.end());
    adj.offsets.push_back(adj.cols.size());
  }
  return adj;
}

Adjacency region_graph(const std::vector<GroupingPoint>& centers, std::size_t k_g) {
  const std::size_t n = centers.size();
  const std::size_t k = std::min(k_g, n);
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  const auto table = knn_regions(centers, all, k);
  std::vector<std::vector<std::uint32_t>> lists(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const auto nb = table[i * k + j];
      lists[i].push_back(nb);
      lists[nb].push_back(static_cast<std::uint32_t>(i));
    }
  }
  return adjacency_from_lists(lists);
}

Mat encoder_input(const RegionBatch& batch, const ModelParams& params) {
  check_batch(batch);
  const std::size_t n = batch.regions();
  const std::size_t k = batch.members();
  Mat x(static_cast<Eigen::Index>(n * k), static_cast<Eigen::Index>(kSplatAttributes));
  for (std::size_t i = 0; i < n; ++i) {
    const float* center = batch.embedding(i, 0);
    for (std::size_t j = 0; j < k; ++j) {
      const float* m = batch.embedding(i, j);
      const auto r = static_cast<Eigen::Index>(i * k + j);
      for (std::size_t a = 0; a < kSplatAttributes; ++a) x(r, static_cast<Eigen::Index>(a)) = m[a];
      if (params.config().relative_centroids) {
        for (Eigen::Index a = 0; a < 3; ++a) x(r, a) -= static_cast<double>(center[a]);
      }
    }
  }
  const auto& shift = params.at("encoder.input_shift").value;
  const auto& scale = params.at("encoder.input_scale").value;
  x = (x.array().rowwise() - shift.row(0).array()).rowwise() * scale.row(0).array();
  return x;
}

void fit_input_normalization(ModelParams& params, const std::vector<const RegionBatch*>& batches) {
  require(!batches.empty(), ErrorKind::kDomain, "input normalization needs at least one batch");
  auto& shift = params.at("encoder.input_shift").value;
  auto& scale = params.at("encoder.input_scale").value;
  shift.setZero();
  scale.setOnes();
  Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(kSplatAttributes);
  Eigen::ArrayXd sum_sq = Eigen::ArrayXd::Zero(kSplatAttributes);
  double rows = 0.0;
  for (const auto* b : batches) {
    const Mat x = encoder_input(*b, params);
    sum += x.colwise().sum().transpose().array();
    rows += static_cast<double>(x.rows());
  }
  const Eigen::ArrayXd mean = sum / rows;
  for (const auto* b : batches) {
    const Mat x = encoder_input(*b, params);
    sum_sq += (x.array().rowwise() - mean.transpose()).square().colwise().sum().transpose();
  }
  const Eigen::ArrayXd sd = (sum_sq / rows).sqrt();
  for (Eigen::Index a = 0; a < static_cast<Eigen::Index>(kSplatAttributes); ++a) {
    shift(0, a) = mean(a);
    scale(0, a) = sd(a) > 1e-12 ? 1.0 / sd(a) : 1.0;
  }
}

TokenGrid encode_regions(const RegionBatch& batch, const ModelParams& params,
                         EncoderCache* cache) {
  const std::size_t n = batch.regions();
  const std::size_t k = batch.members();
  const auto d = static_cast<Eigen::Index>(params.config().d);
  Mat x = encoder_input(batch, params);
  Mat a1 = (x * params.at("encoder.fc1.weight").value).rowwise() +
           params.at("encoder.fc1.bias").value.row(0);
  Mat u1 = gelu_of(a1);
  const Mat a2 = (u1 * params.at("encoder.fc2.weight").value).rowwise() +
                 params.at("encoder.fc2.bias").value.row(0);

  TokenGrid grid;
  grid.tokens.resize(static_cast<Eigen::Index>(n), d);
  std::vector<std::uint32_t> argmax(n * static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < d; ++c) {
      std::size_t best = 0;
      double best_v = a2(static_cast<Eigen::Index>(i * k), c);
      for (std::size_t j = 1; j < k; ++j) {
        const double v = a2(static_cast<Eigen::Index>(i * k + j), c);
        if (v > best_v) {
          best_v = v;
          best = j;
        }
      }
      grid.tokens(static_cast<Eigen::Index>(i), c) = best_v;
      argmax[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)] =
          static_cast<std::uint32_t>(best);
    }
  }
  grid.adjacency = region_graph(center_points(batch), params.config().k_g);
  if (cache != nullptr) {
    cache->x = std::move(x);
    cache->a1 = std::move(a1);
    cache->u1 = std::move(u1);
    cache->argmax = std::move(argmax);
    cache->n = n;
    cache->k = k;
  }
  return grid;
}

namespace {

void encoder_backward(ModelParams& params, const EncoderCache& cache, const Mat& d_tokens) {
  const auto d = d_tokens.cols();
  Mat d_a2 = Mat::Zero(static_cast<Eigen::Index>(cache.n * cache.k), d);
  for (std::size_t i = 0; i < cache.n; ++i) {
    for (Eigen::Index c = 0; c < d; ++c) {
      const auto j = cache.argmax[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)];
      d_a2(static_cast<Eigen::Index>(i * cache.k + j), c) += d_tokens(static_cast<Eigen::Index>(i), c);
    }
  }
  auto& w2 = params.at("encoder.fc2.weight");
  w2.grad.noalias() += cache.u1.transpose() * d_a2;
  params.at("encoder.fc2.bias").grad += colsum(d_a2);
  const Mat d_a1 = (d_a2 * w2.value.transpose()).cwiseProduct(gelu_grad_of(cache.a1));
  params.at("encoder.fc1.weight").grad.noalias() += cache.x.transpose() * d_a1;
  params.at("encoder.fc1.bias").grad += colsum(d_a1);
}

}  // namespace

// ---------------------------------------------------------------------------
// GAT block

Mat gat_block(const Mat& h_in, const Adjacency& adj, const ModelParams& params,
              std::size_t block, GatCache* cache) {
  const auto& cfg = params.config();
  require(block < cfg.blocks, ErrorKind::kContract, "GAT block index out of range");
  require(h_in.cols() == static_cast<Eigen::Index>(cfg.d) &&
              adj.nodes() == static_cast<std::size_t>(h_in.rows()),
          ErrorKind::kContract, "GAT block input shape mismatch");
  const std::size_t n = adj.nodes();
  const auto hd = static_cast<Eigen::Index>(cfg.d / cfg.heads);

  auto ln1 = layer_norm(h_in, params.at(block_name(block, "ln1.gain")).value,
                        params.at(block_name(block, "ln1.bias")).value);
  Mat p = ln1.z * params.at(block_name(block, "attn.weight")).value;
  const Mat& a_src = params.at(block_name(block, "attn.a_src")).value;
  const Mat& a_dst = params.at(block_name(block, "attn.a_dst")).value;

  Mat o = Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cfg.d));
  std::vector<std::vector<double>> pre(cfg.heads, std::vector<double>(adj.cols.size()));
  std::vector<std::vector<double>> alpha(cfg.heads, std::vector<double>(adj.cols.size()));
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const auto col0 = static_cast<Eigen::Index>(h) * hd;
    const Eigen::VectorXd s_src = p.middleCols(col0, hd) * a_src.row(static_cast<Eigen::Index>(h)).transpose();
    const Eigen::VectorXd s_dst = p.middleCols(col0, hd) * a_dst.row(static_cast<Eigen::Index>(h)).transpose();
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = adj.offsets[i]; e < adj.offsets[i + 1]; ++e) {
        const double u = s_src(static_cast<Eigen::Index>(i)) + s_dst(adj.cols[e]);
        pre[h][e] = u;
        const double act = u > 0.0 ? u : kLeakySlope * u;
        alpha[h][e] = act;
        mx = std::max(mx, act);
      }
      double denom = 0.0;
      for (std::size_t e = adj.offsets[i]; e < adj.offsets[i + 1]; ++e) {
        alpha[h][e] = std::exp(alpha[h][e] - mx);
        denom += alpha[h][e];
      }
      for (std::size_t e = adj.offsets[i]; e < adj.offsets[i + 1]; ++e) {
        alpha[h][e] /= denom;
        o.block(static_cast<Eigen::Index>(i), col0, 1, hd) +=
            alpha[h][e] * p.block(adj.cols[e], col0, 1, hd);
      }
    }
  }
  Mat h1 = (o * params.at(block_name(block, "attn.proj.weight")).value).rowwise() +
           params.at(block_name(block, "attn.proj.bias")).value.row(0);
  h1 += h_in;

  auto ln2 = layer_norm(h1, params.at(block_name(block, "ln2.gain")).value,
                        params.at(block_name(block, "ln2.bias")).value);
  Mat f1 = (ln2.z * params.at(block_name(block, "ffn.fc1.weight")).value).rowwise() +
           params.at(block_name(block, "ffn.fc1.bias")).value.row(0);
  Mat g = gelu_of(f1);
  Mat out = (g * params.at(block_name(block, "ffn.fc2.weight")).value).rowwise() +
            params.at(block_name(block, "ffn.fc2.bias")).value.row(0);
  out += h1;

  if (cache != nullptr) {
    cache->h_in = h_in;
    cache->xhat1 = std::move(ln1.xhat);
    cache->rstd1 = std::move(ln1.rstd);
    cache->z1 = std::move(ln1.z);
    cache->p = std::move(p);
    cache->o = std::move(o);
    cache->h1 = std::move(h1);
    cache->xhat2 = std::move(ln2.xhat);
    cache->rstd2 = std::move(ln2.rstd);
    cache->z2 = std::move(ln2.z);
    cache->f1 = std::move(f1);
    cache->g = std::move(g);
    cache->pre_activation = std::move(pre);
    cache->alpha = std::move(alpha);
  }
  return out;
}

Mat gat_block_backward(ModelParams& params, std::size_t block, const Adjacency& adj,
                       const GatCache& cache, const Mat& d_out) {
  const auto& cfg = params.config();
  const std::size_t n = adj.nodes();
  const auto hd = static_cast<Eigen::Index>(cfg.d / cfg.heads);

  // F branch.
  auto& fc2 = params.at(block_name(block, "ffn.fc2.weight"));
  fc2.grad.noalias() += cache.g.transpose() * d_out;
  params.at(block_name(block, "ffn.fc2.bias")).grad += colsum(d_out);
  const Mat d_f1 = (d_out * fc2.value.transpose()).cwiseProduct(gelu_grad_of(cache.f1));
  auto& fc1 = params.at(block_name(block, "ffn.fc1.weight"));
  fc1.grad.noalias() += cache.z2.transpose() * d_f1;
  params.at(block_name(block, "ffn.fc1.bias")).grad += colsum(d_f1);
  const Mat d_z2 = d_f1 * fc1.value.transpose();
  Mat d_h1 = d_out + layer_norm_backward(d_z2, cache.xhat2, cache.rstd2,
                                         params.at(block_name(block, "ln2.gain")),
                                         params.at(block_name(block, "ln2.bias")));

  // M branch.
  auto& proj = params.at(block_name(block, "attn.proj.weight"));
  proj.grad.noalias() += cache.o.transpose() * d_h1;
  params.at(block_name(block, "attn.proj.bias")).grad += colsum(d_h1);
  const Mat d_o = d_h1 * proj.value.transpose();

  auto& a_src = params.at(block_name(block, "attn.a_src"));
  auto& a_dst = params.at(block_name(block, "attn.a_dst"));
  Mat d_p = Mat::Zero(cache.p.rows(), cache.p.cols());
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const auto col0 = static_cast<Eigen::Index>(h) * hd;
    const auto hr = static_cast<Eigen::Index>(h);
    Eigen::VectorXd ds_src = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    Eigen::VectorXd ds_dst = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    const auto& alpha = cache.alpha[h];
    const auto& pre = cache.pre_activation[h];
    std::vector<double> d_alpha;
    for (std::size_t i = 0; i < n; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      const auto d_oi = d_o.block(ii, col0, 1, hd);
      d_alpha.clear();
      double weighted = 0.0;
      for (std::size_t e = adj.offsets[i]; e < adj.offsets[i + 1]; ++e) {
        const auto j = static_cast<Eigen::Index>(adj.cols[e]);
        const double da = d_oi.cwiseProduct(cache.p.block(j, col0, 1, hd)).sum();
        d_alpha.push_back(da);
        weighted += alpha[e] * da;
        d_p.block(j, col0, 1, hd) += alpha[e] * d_oi;
      }
      for (std::size_t e = adj.offsets[i]; e < adj.offsets[i + 1]; ++e) {
        const double d_act = alpha[e] * (d_alpha[e - adj.offsets[i]] - weighted);
        const double d_u = d_act * (pre[e] > 0.0 ? 1.0 : kLeakySlope);
        ds_src(ii) += d_u;
        ds_dst(adj.cols[e]) += d_u;
      }
    }
    const auto p_h = cache.p.middleCols(col0, hd);
    a_src.grad.row(hr) += ds_src.transpose() * p_h;
    a_dst.grad.row(hr) += ds_dst.transpose() * p_h;
    d_p.middleCols(col0, hd) += ds_src * a_src.value.row(hr) + ds_dst * a_dst.value.row(hr);
  }
  auto& w = params.at(block_name(block, "attn.weight"));
  w.grad.noalias() += cache.z1.transpose() * d_p;
  const Mat d_z1 = d_p * w.value.transpose();
  return d_h1 + layer_norm_backward(d_z1, cache.xhat1, cache.rstd1,
                                    params.at(block_name(block, "ln1.gain")),
                                    params.at(block_name(block, "ln1.bias")));
}

// ---------------------------------------------------------------------------
// Pooling and head

PoolResult attention_pool(const Mat& h, const ModelParams& params, PoolCache* cache) {
  require(h.rows() >= 1, ErrorKind::kContract, "attention pooling needs at least one token");
  Mat a = h * params.at("pool.w_e").value;
  Mat u = gelu_of(a);
  const Eigen::VectorXd scores = u * params.at("pool.w_q").value.col(0);
  const double mx = scores.maxCoeff();
  Eigen::VectorXd alphas = (scores.array() - mx).exp();
  alphas /= alphas.sum();
  PoolResult r;
  r.feature = alphas.transpose() * h;
  r.alphas = alphas;
  if (cache != nullptr) {
    cache->h = h;
    cache->a = std::move(a);
    cache->u = std::move(u);
    cache->alphas = std::move(alphas);
  }
  return r;
}

Mat attention_pool_backward(ModelParams& params, const PoolCache& cache, const Mat& d_feature) {
  Mat d_h = cache.alphas * d_feature;
  const Eigen::VectorXd d_alpha = cache.h * d_feature.transpose();
  const double weighted = cache.alphas.dot(d_alpha);
  const Eigen::VectorXd d_scores = cache.alphas.array() * (d_alpha.array() - weighted);
  auto& wq = params.at("pool.w_q");
  auto& we = params.at("pool.w_e");
  wq.grad.col(0) += cache.u.transpose() * d_scores;
  const Mat d_a = (d_scores * wq.value.col(0).transpose()).cwiseProduct(gelu_grad_of(cache.a));
  we.grad.noalias() += cache.h.transpose() * d_a;
  d_h.noalias() += d_a * we.value.transpose();
  return d_h;
}

// ---------------------------------------------------------------------------
// Whole network

namespace {

double forward_from_grid(const ModelParams& params, TokenGrid grid, ForwardCache* cache) {
  const auto& cfg = params.config();
  Mat h = std::move(grid.tokens);
  if (cache != nullptr) cache->blocks.assign(cfg.blocks, GatCache{});
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    h = gat_block(h, grid.adjacency, params, b, cache != nullptr ? &cache->blocks[b] : nullptr);
  }
  PoolResult pooled = attention_pool(h, params, cache != nullptr ? &cache->pool : nullptr);
  const double score =
      (pooled.feature * params.at("head.weight").value)(0, 0) + params.at("head.bias").value(0, 0);
  if (cache != nullptr) {
    cache->adjacency = std::move(grid.adjacency);
    cache->feature = std::move(pooled.feature);
    cache->score = score;
    cache->params_version = params.version();
    cache->owner = &params;
    cache->valid = true;
  }
  return score;
}

}  // namespace

double forward(const ModelParams& params, const RegionBatch& batch, ForwardCache* cache) {
  check_batch(batch);
  if (cache != nullptr) {
    cache->valid = false;
    cache->from_tokens = false;
  }
  TokenGrid grid = encode_regions(batch, params, cache != nullptr ? &cache->encoder : nullptr);
  return forward_from_grid(params, std::move(grid), cache);
}

double forward_tokens(const ModelParams& params, const TokenGrid& grid, ForwardCache* cache) {
  require(grid.tokens.cols() == static_cast<Eigen::Index>(params.config().d) &&
              grid.adjacency.nodes() == static_cast<std::size_t>(grid.tokens.rows()),
          ErrorKind::kContract, "token grid does not match the network width");
  if (cache != nullptr) {
    cache->valid = false;
    cache->from_tokens = true;
  }
  return forward_from_grid(params, grid, cache);
}

void backward(ModelParams& params, const ForwardCache& cache, double upstream, Mat* d_tokens) {
  require(cache.valid && cache.owner == &params && cache.params_version == params.version(),
          ErrorKind::kContract, "stale forward cache: parameters changed since the forward pass");
  auto& head_w = params.at("head.weight");
  head_w.grad += upstream * cache.feature.transpose();
  params.at("head.bias").grad(0, 0) += upstream;
  const Mat d_feature = upstream * head_w.value.transpose();
  Mat d_h = attention_pool_backward(params, cache.pool, d_feature);
  for (std::size_t b = params.config().blocks; b-- > 0;) {
    d_h = gat_block_backward(params, b, cache.adjacency, cache.blocks[b], d_h);
  }
  if (d_tokens != nullptr) *d_tokens = d_h;
  if (!cache.from_tokens) encoder_backward(params, cache.encoder, d_h);
}

namespace {

constexpr char kTokenMagic[4] = {'G', 'S', 'T', 'K'};

}  // namespace

void write_tokens(const Mat& tokens, const std::filesystem::path& path) {
  std::string out(kTokenMagic, 4);
  auto put32 = [&](std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); };
  put32(1);
  put32(static_cast<std::uint32_t>(tokens.rows()));
  put32(static_cast<std::uint32_t>(tokens.cols()));
  out.append(reinterpret_cast<const char*>(tokens.data()),
             static_cast<std::size_t>(tokens.size()) * sizeof(double));
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) fail(ErrorKind::kIo, "cannot write token file '" + path.string() + "'");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
}

Mat read_tokens(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open token file '" + path.string() + "'");
  char magic[4];
  std::uint32_t header[3];
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!in || std::memcmp(magic, kTokenMagic, 4) != 0 || header[0] != 1) {
    fail(ErrorKind::kParse, "'" + path.string() + "' is not a version-1 token file");
  }
  Mat tokens(header[1], header[2]);
  in.read(reinterpret_cast<char*>(tokens.data()), static_cast<std::streamsize>(tokens.size() * sizeof(double)));
  if (!in) fail(ErrorKind::kIo, "truncated token file '" + path.string() + "'");
  return tokens;
}

TokenGrid token_grid(Mat tokens, const RegionBatch& batch, std::size_t k_g) {
  check_batch(batch);
  require(static_cast<std::size_t>(tokens.rows()) == batch.regions(), ErrorKind::kContract,
          "token count does not match the region count");
  TokenGrid grid;
  grid.tokens = std::move(tokens);
  grid.adjacency = region_graph(center_points(batch), k_g);
  return grid;
}

// ---------------------------------------------------------------------------
// Inference-only path

template <typename Scalar>
double predict(const ModelParams& params, const RegionBatch& batch) {
  using M = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using V = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  const auto& cfg = params.config();
  auto w = [&](const std::string& name) -> M { return params.at(name).value.cast<Scalar>(); };
  auto act = [](const M& m) {
    return M(m.unaryExpr([](Scalar x) {
      return static_cast<Scalar>(0.5) * x *
             (static_cast<Scalar>(1) + std::erf(x / std::sqrt(static_cast<Scalar>(2))));
    }));
  };
  auto norm = [](const M& x, const M& gain, const M& bias) {
    M out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const Scalar mean = x.row(i).mean();
      const Scalar var = (x.row(i).array() - mean).square().mean();
      const Scalar r = static_cast<Scalar>(1) / std::sqrt(var + static_cast<Scalar>(kLayerNormEps));
      out.row(i) = ((x.row(i).array() - mean) * r * gain.row(0).array() + bias.row(0).array()).matrix();
    }
    return out;
  };

  const std::size_t n = batch.regions();
  const std::size_t k = batch.members();
  const M x = encoder_input(batch, params).cast<Scalar>();
  const M a2 = (act((x * w("encoder.fc1.weight")).rowwise() + w("encoder.fc1.bias").row(0)) *
                w("encoder.fc2.weight"))
                   .rowwise() +
               w("encoder.fc2.bias").row(0);
  M h(static_cast<Eigen::Index>(n), a2.cols());
  for (std::size_t i = 0; i < n; ++i) {
    h.row(static_cast<Eigen::Index>(i)) =
        a2.middleRows(static_cast<Eigen::Index>(i * k), static_cast<Eigen::Index>(k)).colwise().maxCoeff();
  }
  const Adjacency adj = region_graph(center_points(batch), cfg.k_g);
  const auto hd = static_cast<Eigen::Index>(cfg.d / cfg.heads);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const M z = norm(h, w(block_name(b, "ln1.gain")), w(block_name(b, "ln1.bias")));
    const M p = z * w(block_name(b, "attn.weight"));
    const M as = w(block_name(b, "attn.a_src"));
    const M ad = w(block_name(b, "attn.a_dst"));
    M o = M::Zero(h.rows(), h.cols());
    for (Eigen::Index hh = 0; hh < static_cast<Eigen::Index>(cfg.heads); ++hh) {
      const V src = p.middleCols(hh * hd, hd) * as.row(hh).transpose();
      const V dst = p.middleCols(hh * hd, hd) * ad.row(hh).transpose();
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<Scalar> e;
        for (std::size_t q = adj.offsets[i]; q < adj.offsets[i + 1]; ++q) {
          const Scalar u = src(static_cast<Eigen::Index>(i)) + dst(adj.cols[q]);
          e.push_back(u > 0 ? u : static_cast<Scalar>(kLeakySlope) * u);
        }
        const Scalar mx = *std::max_element(e.begin(), e.end());
        Scalar total = 0;
        for (auto& v : e) total += (v = std::exp(v - mx));
        for (std::size_t q = adj.offsets[i]; q < adj.offsets[i + 1]; ++q) {
          o.block(static_cast<Eigen::Index>(i), hh * hd, 1, hd) +=
              (e[q - adj.offsets[i]] / total) * p.block(adj.cols[q], hh * hd, 1, hd);
        }
      }
    }
    const M h1 = M((o * w(block_name(b, "attn.proj.weight"))).rowwise() +
                   w(block_name(b, "attn.proj.bias")).row(0)) + h;
    const M z2 = norm(h1, w(block_name(b, "ln2.gain")), w(block_name(b, "ln2.bias")));
    h = M((act((z2 * w(block_name(b, "ffn.fc1.weight"))).rowwise() +
               w(block_name(b, "ffn.fc1.bias")).row(0)) *
           w(block_name(b, "ffn.fc2.weight")))
              .rowwise() +
          w(block_name(b, "ffn.fc2.bias")).row(0)) + h1;
  }
  const V s = act(h * w("pool.w_e")) * w("pool.w_q").col(0);
  V alpha = (s.array() - s.maxCoeff()).exp();
  alpha /= alpha.sum();
  const M feature = alpha.transpose() * h;
  return static_cast<double>((feature * w("head.weight"))(0, 0) + w("head.bias")(0, 0));
}

template double predict<double>(const ModelParams&, const RegionBatch&);
template double predict<float>(const ModelParams&, const RegionBatch&);

// ---------------------------------------------------------------------------
// Checkpoints

std::string config_to_json(const NetConfig& c) {
  nlohmann::ordered_json j;
  j["d"] = c.d;
  j["heads"] = c.heads;
  j["ffn_mult"] = c.ffn_mult;
  j["k_g"] = c.k_g;
  j["blocks"] = c.blocks;
  j["relative_centroids"] = c.relative_centroids;
  return j.dump();
}

NetConfig config_from_json(const std::string& text) {
  NetConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.d = j.value("d", c.d);
    c.heads = j.value("heads", c.heads);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.k_g = j.value("k_g", c.k_g);
    c.blocks = j.value("blocks", c.blocks);
    c.relative_centroids = j.value("relative_centroids", c.relative_centroids);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("invalid network config JSON: ") + e.what());
  }
  return c;
}

namespace {

constexpr char kCkptMagic[8] = {'G', 'S', 'Q', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  out.append(bytes, sizeof(T));
}

template <typename T>
T take(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) fail(ErrorKind::kIo, "truncated checkpoint");
  return v;
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".json");
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path,
                     const std::string& sidecar_json) {
  std::string out;
  out.append(kCkptMagic, sizeof(kCkptMagic));
  put<std::uint32_t>(out, kCkptVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.tensors().size()));
  for (const auto& t : params.tensors()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put<std::uint32_t>(out, t.trainable ? 1U : 0U);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.cols()));
    for (Eigen::Index i = 0; i < t.value.size(); ++i) put<double>(out, t.value.data()[i]);
  }
  {
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) fail(ErrorKind::kIo, "cannot write checkpoint '" + path.string() + "'");
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) fail(ErrorKind::kIo, "write failed for checkpoint '" + path.string() + "'");
  }
  nlohmann::ordered_json side;
  side["format"] = "gsqa-checkpoint";
  side["version"] = kCkptVersion;
  side["config"] = nlohmann::ordered_json::parse(config_to_json(params.config()));
  side["parameter_count"] = params.parameter_count();
  side["metadata"] = sidecar_json.empty() ? nlohmann::ordered_json::object()
                                          : nlohmann::ordered_json::parse(sidecar_json);
  std::ofstream file(sidecar_path(path), std::ios::binary | std::ios::trunc);
  if (!file) fail(ErrorKind::kIo, "cannot write checkpoint sidecar for '" + path.string() + "'");
  file << side.dump(2) << "\n";
}

ModelParams load_checkpoint(const std::filesystem::path& path, std::string* sidecar_json) {
  std::ifstream side_in(sidecar_path(path));
  if (!side_in) fail(ErrorKind::kIo, "missing checkpoint sidecar '" + sidecar_path(path).string() + "'");
  std::stringstream ss;
  ss << side_in.rdbuf();
  nlohmann::ordered_json side;
  try {
    side = nlohmann::ordered_json::parse(ss.str());
  } catch (const std::exception& e) {
    fail(ErrorKind::kParse, std::string("invalid checkpoint sidecar: ") + e.what());
  }
  if (!side.contains("config")) fail(ErrorKind::kSchema, "checkpoint sidecar lacks 'config'");
  ModelParams params = ModelParams::create(config_from_json(side["config"].dump()), 0);
  if (sidecar_json != nullptr) {
    *sidecar_json = side.contains("metadata") ? side["metadata"].dump() : std::string("{}");
  }

  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open checkpoint '" + path.string() + "'");
  char magic[sizeof(kCkptMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0) {
    fail(ErrorKind::kParse, "'" + path.string() + "' is not a checkpoint");
  }
  const auto version = take<std::uint32_t>(in);
  if (version != kCkptVersion) fail(ErrorKind::kParse, "unsupported checkpoint version");
  const auto count = take<std::uint32_t>(in);
  if (count != params.tensors().size()) {
    fail(ErrorKind::kSchema, "checkpoint tensor count does not match its configuration");
  }
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = take<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    take<std::uint32_t>(in);
    const auto rows = take<std::uint64_t>(in);
    const auto cols = take<std::uint64_t>(in);
    auto& tensor = params.at(name);
    if (static_cast<std::uint64_t>(tensor.value.rows()) != rows ||
        static_cast<std::uint64_t>(tensor.value.cols()) != cols) {
      fail(ErrorKind::kSchema, "checkpoint tensor '" + name + "' has an unexpected shape");
    }
    in.read(reinterpret_cast<char*>(tensor.value.data()),
            static_cast<std::streamsize>(rows * cols * sizeof(double)));
    if (!in) fail(ErrorKind::kIo, "truncated checkpoint tensor '" + name + "'");
  }
  return params;
}

}  // namespace gsqa::net
