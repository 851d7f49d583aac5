#include "reffil/model.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "reffil/rng.hpp"

namespace reffil {

namespace {

constexpr double kLnEps = 1e-5;

void fill_normal(Mat& m, uint64_t seed, double stddev) {
  Rng rng(seed);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = stddev * rng.normal();
}

void fill_normal(Vec& v, uint64_t seed, double stddev) {
  Rng rng(seed);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = stddev * rng.normal();
}

Vec col_sums(const Mat& m) { return m.colwise().sum().transpose(); }

}  // namespace

void ModelConfig::validate() const {
  if (input_dim < 2) throw std::invalid_argument("model.input_dim must be >= 2");
  if (n_tokens < 1) throw std::invalid_argument("model.n_tokens must be >= 1");
  if (token_dim < 2) throw std::invalid_argument("model.token_dim must be >= 2");
  if (heads < 1) throw std::invalid_argument("model.heads must be >= 1");
  if (token_dim % heads != 0)
    throw std::invalid_argument("model.token_dim must be divisible by model.heads");
  if (prompt_len < 1) throw std::invalid_argument("model.prompt_len must be >= 1");
  if (key_dim < 1) throw std::invalid_argument("model.key_dim must be >= 1");
  if (n_classes < 2) throw std::invalid_argument("model.n_classes must be >= 2");
}

ModelParams ModelParams::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelParams p;
  p.cfg = cfg;
  p.key_init_seed = derive_seed(seed, "task-keys");

  const int din = cfg.input_dim;
  const int h = cfg.extractor_hidden();
  const int nd = cfg.n_tokens * cfg.token_dim;
  const int d = cfg.token_dim;
  const int np1 = cfg.n_tokens + 1;
  const int mh = cfg.cdap_hidden();
  const int pl = cfg.prompt_len;
  const int k = cfg.n_classes;
  const int dv = cfg.key_dim;

  auto s = [&](const char* name) { return derive_seed(seed, name); };

  p.ext_w1 = Mat(h, din);
  fill_normal(p.ext_w1, s("ext.w1"), 1.0 / std::sqrt(static_cast<double>(din)));
  p.ext_b1 = Vec::Zero(h);
  p.ext_w2 = Mat(nd, h);
  fill_normal(p.ext_w2, s("ext.w2"), 1.0 / std::sqrt(static_cast<double>(h)));
  p.ext_b2 = Vec::Zero(nd);

  p.tok_w = Mat(nd, nd);
  fill_normal(p.tok_w, s("tokenizer.w"), 1.0 / std::sqrt(static_cast<double>(nd)));

  p.cls_token = Vec(d);
  fill_normal(p.cls_token, s("cls_token"), 0.5);

  double att_std = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto [name, w] : {std::pair<const char*, Mat*>{"attn.wq", &p.att_wq},
                         {"attn.wk", &p.att_wk},
                         {"attn.wv", &p.att_wv},
                         {"attn.wo", &p.att_wo}}) {
    *w = Mat(d, d);
    fill_normal(*w, s(name), att_std);
  }
  p.att_bq = Vec::Zero(d);
  p.att_bk = Vec::Zero(d);
  p.att_bv = Vec::Zero(d);
  p.att_bo = Vec::Zero(d);
  p.ln1_g = Vec::Ones(d);
  p.ln1_b = Vec::Zero(d);
  p.ln2_g = Vec::Ones(d);
  p.ln2_b = Vec::Zero(d);
  p.mlp_w1 = Mat(4 * d, d);
  fill_normal(p.mlp_w1, s("attn.mlp.w1"), att_std);
  p.mlp_b1 = Vec::Zero(4 * d);
  p.mlp_w2 = Mat(d, 4 * d);
  fill_normal(p.mlp_w2, s("attn.mlp.w2"), 1.0 / std::sqrt(4.0 * d));
  p.mlp_b2 = Vec::Zero(d);

  p.clf_w = Mat(k, d);
  fill_normal(p.clf_w, s("classifier.w"), att_std);
  p.clf_b = Vec::Zero(k);

  p.cdap_ln_g = Vec::Ones(d);
  p.cdap_ln_b = Vec::Zero(d);
  p.cdap_mlp_w1 = Mat(mh, np1);
  fill_normal(p.cdap_mlp_w1, s("cdap.mlp.w1"), 1.0 / std::sqrt(static_cast<double>(np1)));
  p.cdap_mlp_b1 = Vec::Zero(mh);
  p.cdap_mlp_w2 = Mat(pl, mh);
  fill_normal(p.cdap_mlp_w2, s("cdap.mlp.w2"), 1.0 / std::sqrt(static_cast<double>(mh)));
  p.cdap_mlp_b2 = Vec::Zero(pl);
  // CCDA starts near the identity so early prompts keep the MLP's scale.
  p.cdap_ccda_w = Mat(pl, pl);
  fill_normal(p.cdap_ccda_w, s("cdap.ccda.w"), 0.1 / std::sqrt(static_cast<double>(pl)));
  p.cdap_ccda_w += Mat::Identity(pl, pl);
  p.cdap_ccda_b = Vec::Zero(pl);
  // FiLM head starts at the identity modulation: alpha = 1, lambda = 0.
  p.cdap_phi_w = Mat(2 * d, dv);
  fill_normal(p.cdap_phi_w, s("cdap.phi.w"), 0.1 / std::sqrt(static_cast<double>(dv)));
  p.cdap_phi_b = Vec::Zero(2 * d);
  p.cdap_phi_b.head(d).setOnes();

  return p;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z = *this;
  z.for_each_tensor([](const TensorInfo&, auto& tensor) { tensor.setZero(); });
  return z;
}

void ModelParams::ensure_task_key(int task_id) {
  if (task_keys.count(task_id) > 0) return;
  Vec key(cfg.key_dim);
  fill_normal(key, derive_seed(key_init_seed, "key", static_cast<uint64_t>(task_id)), 1.0);
  task_keys.emplace(task_id, std::move(key));
}

Vec ModelParams::inference_key() const {
  Vec mean = Vec::Zero(cfg.key_dim);
  if (task_keys.empty()) return mean;
  for (const auto& [id, key] : task_keys) mean += key;
  return mean / static_cast<double>(task_keys.size());
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for_each_tensor([&](const TensorInfo&, const auto& tensor) {
    n += static_cast<std::size_t>(tensor.size());
  });
  return n;
}

ModelParams fedavg(const std::vector<std::pair<const ModelParams*, std::size_t>>& updates) {
  if (updates.empty()) throw std::invalid_argument("fedavg needs at least one update");
  std::size_t total = 0;
  for (const auto& [params, count] : updates) {
    if (params == nullptr) throw std::invalid_argument("null update");
    total += count;
  }
  if (total == 0) throw std::invalid_argument("fedavg needs a positive total sample count");

  // Aggregation manifests (name + shape of every eligible tensor) must agree.
  auto manifest = [](const ModelParams& p) {
    std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> m;
    p.for_each_tensor([&](const TensorInfo& info, const auto& tensor) {
      if (info.aggregate) m.push_back({info.name, {tensor.rows(), tensor.cols()}});
    });
    return m;
  };
  auto reference = manifest(*updates.front().first);
  for (const auto& [params, count] : updates)
    if (manifest(*params) != reference)
      throw std::invalid_argument("fedavg manifest mismatch across updates");

  ModelParams result = *updates.front().first;
  result.for_each_tensor([&](const TensorInfo& info, auto& tensor) {
    if (info.aggregate) tensor.setZero();
  });

  for (const auto& [params, count] : updates) {
    double w = static_cast<double>(count) / static_cast<double>(total);
    // Zip by canonical position; manifests were checked above.
    std::vector<const double*> src;
    std::vector<Eigen::Index> sizes;
    params->for_each_tensor([&](const TensorInfo& info, const auto& tensor) {
      if (info.aggregate) {
        src.push_back(tensor.data());
        sizes.push_back(tensor.size());
      }
    });
    std::size_t idx = 0;
    result.for_each_tensor([&](const TensorInfo& info, auto& tensor) {
      if (!info.aggregate) return;
      Eigen::Map<const Vec> u(src[idx], sizes[idx]);
      Eigen::Map<Vec>(tensor.data(), tensor.size()) += w * u;
      ++idx;
    });
  }
  return result;
}

void apply_aggregate(ModelParams& dst, const ModelParams& aggregated) {
  std::vector<const double*> src;
  std::vector<Eigen::Index> sizes;
  aggregated.for_each_tensor([&](const TensorInfo& info, const auto& tensor) {
    if (info.aggregate) {
      src.push_back(tensor.data());
      sizes.push_back(tensor.size());
    }
  });
  std::size_t idx = 0;
  dst.for_each_tensor([&](const TensorInfo& info, auto& tensor) {
    if (!info.aggregate) return;
    if (idx >= src.size() || tensor.size() != sizes[idx])
      throw std::invalid_argument("apply_aggregate manifest mismatch");
    Eigen::Map<Vec>(tensor.data(), tensor.size()) = Eigen::Map<const Vec>(src[idx], sizes[idx]);
    ++idx;
  });
}

void sgd_step(ModelParams& params, const ModelParams& grads, double lr) {
  std::vector<const double*> g;
  std::vector<Eigen::Index> sizes;
  std::vector<std::string> names;
  grads.for_each_tensor([&](const TensorInfo& info, const auto& tensor) {
    g.push_back(tensor.data());
    sizes.push_back(tensor.size());
    names.push_back(info.name);
  });
  std::size_t idx = 0;
  params.for_each_tensor([&](const TensorInfo& info, auto& tensor) {
    if (idx >= g.size() || names[idx] != info.name || tensor.size() != sizes[idx])
      throw std::invalid_argument("sgd_step gradient manifest mismatch");
    if (info.trainable)
      Eigen::Map<Vec>(tensor.data(), tensor.size()) -=
          lr * Eigen::Map<const Vec>(g[idx], sizes[idx]);
    ++idx;
  });
  if (idx != g.size()) throw std::invalid_argument("sgd_step gradient manifest mismatch");
}

// ---------------------------------------------------------------------------
// Layer primitives.

namespace {

// Row-wise layer normalization over the feature axis.
Mat ln_forward(const Mat& x, const Vec& gain, const Vec& bias, LnCache& cache) {
  const Eigen::Index m = x.rows(), d = x.cols();
  cache.xhat.resize(m, d);
  cache.inv_std.resize(m);
  Mat y(m, d);
  for (Eigen::Index r = 0; r < m; ++r) {
    double mu = x.row(r).mean();
    double var = (x.row(r).array() - mu).square().mean();
    double inv = 1.0 / std::sqrt(var + kLnEps);
    cache.inv_std[r] = inv;
    cache.xhat.row(r) = ((x.row(r).array() - mu) * inv).matrix();
    y.row(r) = cache.xhat.row(r).cwiseProduct(gain.transpose()) + bias.transpose();
  }
  return y;
}

Mat ln_backward(const Mat& d_y, const LnCache& cache, const Vec& gain, Vec& d_gain,
                Vec& d_bias) {
  const Eigen::Index m = d_y.rows(), d = d_y.cols();
  Mat d_x(m, d);
  for (Eigen::Index r = 0; r < m; ++r) {
    d_gain += d_y.row(r).cwiseProduct(cache.xhat.row(r)).transpose();
    d_bias += d_y.row(r).transpose();
    Eigen::RowVectorXd d_xhat = d_y.row(r).cwiseProduct(gain.transpose());
    double mean_dxhat = d_xhat.mean();
    double mean_dxhat_xhat = d_xhat.cwiseProduct(cache.xhat.row(r)).mean();
    d_x.row(r) = (cache.inv_std[r] *
                  (d_xhat.array() - mean_dxhat - cache.xhat.row(r).array() * mean_dxhat_xhat))
                     .matrix();
  }
  return d_x;
}

Mat row_softmax(const Mat& scores) {
  Mat p(scores.rows(), scores.cols());
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    double m = scores.row(r).maxCoeff();
    Eigen::ArrayXd e = (scores.row(r).array() - m).exp();
    p.row(r) = (e / e.sum()).matrix().transpose();
  }
  return p;
}

}  // namespace

ExtractorCache extractor_forward(const ModelParams& p, const Vec& x) {
  if (x.size() != p.cfg.input_dim)
    throw std::invalid_argument("input dimension mismatch in extractor");
  ExtractorCache cache;
  cache.x = x;
  cache.a1 = (p.ext_w1 * x + p.ext_b1).array().tanh().matrix();
  cache.feat = p.ext_w2 * cache.a1 + p.ext_b2;
  return cache;
}

void extractor_backward(const ModelParams& p, const ExtractorCache& cache, const Vec& d_feat,
                        ModelParams& grads) {
  grads.ext_w2 += d_feat * cache.a1.transpose();
  grads.ext_b2 += d_feat;
  Vec d_a1 = p.ext_w2.transpose() * d_feat;
  Vec d_z1 = d_a1.cwiseProduct(Vec::Ones(cache.a1.size()) - cache.a1.cwiseProduct(cache.a1));
  grads.ext_w1 += d_z1 * cache.x.transpose();
  grads.ext_b1 += d_z1;
}

Mat patch_tokens(const ModelParams& p, const Vec& feat) {
  const int n = p.cfg.n_tokens, d = p.cfg.token_dim;
  Vec flat = p.tok_w * feat;
  Mat pt(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) pt(i, j) = flat[static_cast<Eigen::Index>(i) * d + j];
  return pt;
}

Vec patch_tokens_backward(const ModelParams& p, const Mat& d_pt) {
  const int n = p.cfg.n_tokens, d = p.cfg.token_dim;
  Vec d_flat(static_cast<Eigen::Index>(n) * d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) d_flat[static_cast<Eigen::Index>(i) * d + j] = d_pt(i, j);
  return p.tok_w.transpose() * d_flat;
}

Mat tokenize(const ModelParams& p, const Vec& x) {
  ExtractorCache ext = extractor_forward(p, x);
  Mat pt = patch_tokens(p, ext.feat);
  Mat tokens(p.cfg.n_tokens + 1, p.cfg.token_dim);
  tokens.row(0) = p.cls_token.transpose();
  tokens.bottomRows(p.cfg.n_tokens) = pt;
  return tokens;
}

AttnCache attention_forward(const ModelParams& p, const Mat& seq) {
  if (seq.cols() != p.cfg.token_dim)
    throw std::invalid_argument("token dimension mismatch in attention block");
  if (seq.rows() < 1) throw std::invalid_argument("attention needs at least one token");
  const Eigen::Index m = seq.rows();
  const int d = p.cfg.token_dim, nh = p.cfg.heads, hd = p.cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  AttnCache c;
  c.input = seq;
  c.q = (seq * p.att_wq.transpose()).rowwise() + p.att_bq.transpose();
  c.k = (seq * p.att_wk.transpose()).rowwise() + p.att_bk.transpose();
  c.v = (seq * p.att_wv.transpose()).rowwise() + p.att_bv.transpose();

  c.heads_concat.resize(m, d);
  c.probs.resize(static_cast<std::size_t>(nh));
  for (int h = 0; h < nh; ++h) {
    auto qh = c.q.middleCols(h * hd, hd);
    auto kh = c.k.middleCols(h * hd, hd);
    auto vh = c.v.middleCols(h * hd, hd);
    Mat scores = scale * (qh * kh.transpose());
    c.probs[static_cast<std::size_t>(h)] = row_softmax(scores);
    c.heads_concat.middleCols(h * hd, hd) = c.probs[static_cast<std::size_t>(h)] * vh;
  }
  c.mhsa = (c.heads_concat * p.att_wo.transpose()).rowwise() + p.att_bo.transpose();
  c.ip = ln_forward(c.mhsa, p.ln1_g, p.ln1_b, c.ln1);
  c.mlp_a1 =
      ((c.ip * p.mlp_w1.transpose()).rowwise() + p.mlp_b1.transpose()).array().tanh().matrix();
  c.iq = (c.mlp_a1 * p.mlp_w2.transpose()).rowwise() + p.mlp_b2.transpose();
  c.sum = c.ip + c.iq;
  c.out = ln_forward(c.sum, p.ln2_g, p.ln2_b, c.ln2);
  return c;
}

Mat attention_backward(const ModelParams& p, const AttnCache& c, const Mat& d_out,
                       ModelParams& grads) {
  const Eigen::Index m = c.input.rows();
  const int d = p.cfg.token_dim, nh = p.cfg.heads, hd = p.cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Mat d_sum = ln_backward(d_out, c.ln2, p.ln2_g, grads.ln2_g, grads.ln2_b);

  // MLP branch: iq = tanh(ip W1^T + b1) W2^T + b2
  const Mat& d_iq = d_sum;
  grads.mlp_w2 += d_iq.transpose() * c.mlp_a1;
  grads.mlp_b2 += col_sums(d_iq);
  Mat d_a1 = d_iq * p.mlp_w2;
  Mat d_z1 = d_a1.cwiseProduct(Mat::Ones(m, 4 * d) - c.mlp_a1.cwiseProduct(c.mlp_a1));
  grads.mlp_w1 += d_z1.transpose() * c.ip;
  grads.mlp_b1 += col_sums(d_z1);
  Mat d_ip = d_sum + d_z1 * p.mlp_w1;  // skip path + MLP path

  Mat d_mhsa = ln_backward(d_ip, c.ln1, p.ln1_g, grads.ln1_g, grads.ln1_b);

  grads.att_wo += d_mhsa.transpose() * c.heads_concat;
  grads.att_bo += col_sums(d_mhsa);
  Mat d_concat = d_mhsa * p.att_wo;

  Mat d_q = Mat::Zero(m, d), d_k = Mat::Zero(m, d), d_v = Mat::Zero(m, d);
  for (int h = 0; h < nh; ++h) {
    const Mat& probs = c.probs[static_cast<std::size_t>(h)];
    auto qh = c.q.middleCols(h * hd, hd);
    auto kh = c.k.middleCols(h * hd, hd);
    auto vh = c.v.middleCols(h * hd, hd);
    Mat d_oh = d_concat.middleCols(h * hd, hd);
    Mat d_probs = d_oh * vh.transpose();
    d_v.middleCols(h * hd, hd) = probs.transpose() * d_oh;
    // Row softmax backward: dS_r = (dP_r - <dP_r, P_r>) .* P_r
    Mat d_scores(m, m);
    for (Eigen::Index r = 0; r < m; ++r) {
      double dot = d_probs.row(r).dot(probs.row(r));
      d_scores.row(r) = (d_probs.row(r).array() - dot) * probs.row(r).array();
    }
    d_q.middleCols(h * hd, hd) = scale * (d_scores * kh);
    d_k.middleCols(h * hd, hd) = scale * (d_scores.transpose() * qh);
  }

  grads.att_wq += d_q.transpose() * c.input;
  grads.att_bq += col_sums(d_q);
  grads.att_wk += d_k.transpose() * c.input;
  grads.att_bk += col_sums(d_k);
  grads.att_wv += d_v.transpose() * c.input;
  grads.att_bv += col_sums(d_v);
  return d_q * p.att_wq + d_k * p.att_wk + d_v * p.att_wv;
}

Mat attention_block(const ModelParams& p, const Mat& tokens) {
  return attention_forward(p, tokens).out;
}

CdapCache cdap_forward(const ModelParams& p, const Mat& tokens, std::optional<int> task_id) {
  if (tokens.rows() != p.cfg.n_tokens + 1 || tokens.cols() != p.cfg.token_dim)
    throw std::invalid_argument("prompt generator expects the (n+1, d) token sequence");
  CdapCache c;
  if (task_id.has_value()) {
    auto it = p.task_keys.find(*task_id);
    if (it == p.task_keys.end())
      throw std::invalid_argument("unknown task_id in training mode: " +
                                  std::to_string(*task_id));
    c.task_id = *task_id;
    c.key = it->second;
  } else {
    c.task_id = -1;
    c.key = p.inference_key();
  }

  c.ln_out = ln_forward(tokens, p.cdap_ln_g, p.cdap_ln_b, c.ln);
  c.z = c.ln_out.transpose();  // (d, n+1)
  c.a1 = ((c.z * p.cdap_mlp_w1.transpose()).rowwise() + p.cdap_mlp_b1.transpose())
             .array()
             .tanh()
             .matrix();
  c.b = (c.a1 * p.cdap_mlp_w2.transpose()).rowwise() + p.cdap_mlp_b2.transpose();
  c.c = (c.b * p.cdap_ccda_w.transpose()).rowwise() + p.cdap_ccda_b.transpose();

  Vec phi_out = p.cdap_phi_w * c.key + p.cdap_phi_b;
  const int d = p.cfg.token_dim;
  c.alpha = phi_out.head(d);
  c.lambda = phi_out.tail(d);

  // FiLM along the channel axis: row i scaled by alpha_i after shift lambda_i.
  Mat modulated =
      ((c.c.colwise() + c.lambda).array().colwise() * c.alpha.array()).matrix();
  c.prompt = modulated.transpose();  // (p, d)
  return c;
}

Mat cdap_backward(const ModelParams& p, const CdapCache& c, const Mat& d_prompt,
                  ModelParams& grads) {
  if (c.task_id < 0)
    throw std::logic_error("cannot backpropagate through an inference-mode prompt");
  const int d = p.cfg.token_dim;

  Mat d_mod = d_prompt.transpose();  // (d, p)
  Vec d_alpha(d), d_lambda(d);
  Mat d_c(d_mod.rows(), d_mod.cols());
  for (int i = 0; i < d; ++i) {
    double a = c.alpha[i];
    d_alpha[i] = d_mod.row(i).dot((c.c.row(i).array() + c.lambda[i]).matrix());
    d_c.row(i) = a * d_mod.row(i);
    d_lambda[i] = a * d_mod.row(i).sum();
  }
  Vec d_phi_out(2 * d);
  d_phi_out.head(d) = d_alpha;
  d_phi_out.tail(d) = d_lambda;
  grads.cdap_phi_w += d_phi_out * c.key.transpose();
  grads.cdap_phi_b += d_phi_out;
  auto key_grad = grads.task_keys.find(c.task_id);
  if (key_grad != grads.task_keys.end())
    key_grad->second += p.cdap_phi_w.transpose() * d_phi_out;

  grads.cdap_ccda_w += d_c.transpose() * c.b;
  grads.cdap_ccda_b += col_sums(d_c);
  Mat d_b = d_c * p.cdap_ccda_w;

  grads.cdap_mlp_w2 += d_b.transpose() * c.a1;
  grads.cdap_mlp_b2 += col_sums(d_b);
  Mat d_a1 = d_b * p.cdap_mlp_w2;
  Mat d_z1 =
      d_a1.cwiseProduct(Mat::Ones(c.a1.rows(), c.a1.cols()) - c.a1.cwiseProduct(c.a1));
  grads.cdap_mlp_w1 += d_z1.transpose() * c.z;
  grads.cdap_mlp_b1 += col_sums(d_z1);
  Mat d_z = d_z1 * p.cdap_mlp_w1;  // (d, n+1)

  Mat d_ln_out = d_z.transpose();  // (n+1, d)
  return ln_backward(d_ln_out, c.ln, p.cdap_ln_g, grads.cdap_ln_g, grads.cdap_ln_b);
}

Vec classify(const ModelParams& p, const Vec& cls_out) { return p.clf_w * cls_out + p.clf_b; }

Mat generate_prompt(const ModelParams& p, const Mat& tokens, int task_id) {
  return cdap_forward(p, tokens, task_id).prompt;
}

Mat generate_prompt_inference(const ModelParams& p, const Mat& tokens) {
  return cdap_forward(p, tokens, std::nullopt).prompt;
}

Vec flatten_prompt(const Mat& prompt) {
  Vec flat(prompt.size());
  Eigen::Index idx = 0;
  for (Eigen::Index i = 0; i < prompt.rows(); ++i)
    for (Eigen::Index j = 0; j < prompt.cols(); ++j) flat[idx++] = prompt(i, j);
  return flat;
}

Mat unflatten_prompt(const Vec& flat, int rows, int cols) {
  if (flat.size() != static_cast<Eigen::Index>(rows) * cols)
    throw std::invalid_argument("flattened prompt has the wrong length");
  Mat prompt(rows, cols);
  Eigen::Index idx = 0;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) prompt(i, j) = flat[idx++];
  return prompt;
}

Mat global_prompt_block(const GlobalPromptSet& set, int prompt_len, int token_dim) {
  Mat block(static_cast<Eigen::Index>(set.classes.size()) * prompt_len, token_dim);
  Eigen::Index row = 0;
  for (const auto& [k, cp] : set.classes) {  // std::map: ascending class id
    if (cp.averaged.size() != static_cast<Eigen::Index>(prompt_len) * token_dim)
      throw std::invalid_argument("global prompt length does not match prompt_len * token_dim");
    block.middleRows(row, prompt_len) = unflatten_prompt(cp.averaged, prompt_len, token_dim);
    row += prompt_len;
  }
  return block;
}

namespace {

Mat assemble_sequence(const ModelParams& p, const Mat& pt, const Mat* prompts) {
  Eigen::Index prompt_rows = prompts ? prompts->rows() : 0;
  Mat seq(1 + prompt_rows + pt.rows(), p.cfg.token_dim);
  seq.row(0) = p.cls_token.transpose();
  if (prompt_rows > 0) seq.middleRows(1, prompt_rows) = *prompts;
  seq.bottomRows(pt.rows()) = pt;
  return seq;
}

}  // namespace

ForwardResult forward(const ModelParams& p, const Vec& x, const std::optional<Mat>& prompts) {
  if (prompts.has_value() && prompts->rows() > 0 && prompts->cols() != p.cfg.token_dim)
    throw std::invalid_argument("prompt dimension does not match token dimension");
  ExtractorCache ext = extractor_forward(p, x);
  Mat pt = patch_tokens(p, ext.feat);
  const Mat* block = (prompts.has_value() && prompts->rows() > 0) ? &*prompts : nullptr;
  Mat seq = assemble_sequence(p, pt, block);
  Mat out = attention_block(p, seq);
  return ForwardResult{classify(p, out.row(0).transpose()), std::nullopt};
}

ForwardResult forward_with_generator(const ModelParams& p, const Vec& x,
                                     std::optional<int> task_id) {
  ExtractorCache ext = extractor_forward(p, x);
  Mat pt = patch_tokens(p, ext.feat);
  Mat base = assemble_sequence(p, pt, nullptr);
  CdapCache cdap = cdap_forward(p, base, task_id);
  Mat seq = assemble_sequence(p, pt, &cdap.prompt);
  Mat out = attention_block(p, seq);
  return ForwardResult{classify(p, out.row(0).transpose()), flatten_prompt(cdap.prompt)};
}

int predict(const ModelParams& p, const Vec& x, bool use_prompts) {
  Vec logits = use_prompts ? forward_with_generator(p, x, std::nullopt).logits
                           : forward(p, x).logits;
  Eigen::Index best = 0;
  logits.maxCoeff(&best);
  return static_cast<int>(best);
}

double evaluate_accuracy(const ModelParams& p, const std::vector<LabeledSample>& test_set,
                         bool use_prompts) {
  if (test_set.empty()) throw std::invalid_argument("empty test set");
  std::size_t correct = 0;
  for (const auto& s : test_set)
    if (predict(p, s.features, use_prompts) == s.label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(test_set.size());
}

// ---------------------------------------------------------------------------
// Batch objective.

namespace {

struct SampleState {
  ExtractorCache ext;
  Mat pt;
  CdapCache cdap;
  Vec u;  // flattened instance prompt
  AttnCache attn_local;
  Vec logits_local;
  AttnCache attn_global;
  Vec logits_global;
  bool has_global = false;
  std::optional<ContrastiveSamples> contrastive;
  DpclResult dpcl;
  double dpcl_weight = 0.0;  // backward scale for the contrastive term
};

}  // namespace

BatchStats train_loss_and_grads(const ModelParams& params, const std::vector<BatchSample>& batch,
                                const GlobalPromptSet& global_set, const TrainOptions& options,
                                ModelParams* grads,
                                std::map<int, std::vector<Vec>>* prompt_sink) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const int pl = params.cfg.prompt_len, d = params.cfg.token_dim;
  const bool gpl_active = options.use_prompts && options.use_gpl && !global_set.empty();

  Mat gblock;
  if (gpl_active) gblock = global_prompt_block(global_set, pl, d);

  const std::size_t n = batch.size();
  std::vector<SampleState> states(n);
  BatchStats stats;
  stats.count = static_cast<int>(n);

  // Forward all samples.
  for (std::size_t i = 0; i < n; ++i) {
    const auto& bs = batch[i];
    SampleState& st = states[i];
    st.ext = extractor_forward(params, bs.sample.features);
    st.pt = patch_tokens(params, st.ext.feat);
    Mat base = assemble_sequence(params, st.pt, nullptr);

    if (options.use_prompts) {
      st.cdap = cdap_forward(params, base, bs.task_id);
      st.u = flatten_prompt(st.cdap.prompt);
      if (prompt_sink) (*prompt_sink)[bs.sample.label].push_back(st.u);
      Mat seq = assemble_sequence(params, st.pt, &st.cdap.prompt);
      st.attn_local = attention_forward(params, seq);
    } else {
      st.attn_local = attention_forward(params, base);
    }
    st.logits_local = classify(params, st.attn_local.out.row(0).transpose());
    stats.ce += ce_loss(st.logits_local, bs.sample.label);

    if (gpl_active) {
      Mat seq_g = assemble_sequence(params, st.pt, &gblock);
      st.attn_global = attention_forward(params, seq_g);
      st.logits_global = classify(params, st.attn_global.out.row(0).transpose());
      st.has_global = true;
      stats.gpl += gpl_loss(st.logits_global, bs.sample.label);
    }

    if (options.use_prompts && options.use_dpcl) {
      st.contrastive =
          sample_contrastive(st.u, bs.sample.label, global_set, options.group);
      if (st.contrastive) st.dpcl = dpcl_loss(*st.contrastive, options.tau_prime);
    }
  }
  stats.ce /= static_cast<double>(n);
  if (gpl_active) stats.gpl /= static_cast<double>(n);

  // Contrastive term: per-class mean, then mean over the classes present.
  std::map<int, std::vector<std::size_t>> active_by_class;
  for (std::size_t i = 0; i < n; ++i)
    if (states[i].contrastive) active_by_class[batch[i].sample.label].push_back(i);
  if (!active_by_class.empty()) {
    double class_sum = 0.0;
    for (const auto& [label, members] : active_by_class) {
      double mean = 0.0;
      for (std::size_t i : members) mean += states[i].dpcl.loss;
      mean /= static_cast<double>(members.size());
      class_sum += mean;
      double w = 1.0 / (static_cast<double>(active_by_class.size()) *
                        static_cast<double>(members.size()));
      for (std::size_t i : members) states[i].dpcl_weight = w;
    }
    stats.dpcl = class_sum / static_cast<double>(active_by_class.size());
  }

  if (grads == nullptr) return stats;

  const double w_ce = 1.0 / static_cast<double>(n);
  const double w_gpl = gpl_active ? 1.0 / static_cast<double>(n) : 0.0;

  for (std::size_t i = 0; i < n; ++i) {
    const auto& bs = batch[i];
    SampleState& st = states[i];

    // Local-prompt route.
    Vec d_logits = w_ce * ce_loss_grad(st.logits_local, bs.sample.label);
    grads->clf_w += d_logits * st.attn_local.out.row(0);
    grads->clf_b += d_logits;
    Mat d_out = Mat::Zero(st.attn_local.out.rows(), st.attn_local.out.cols());
    d_out.row(0) = (params.clf_w.transpose() * d_logits).transpose();
    Mat d_seq = attention_backward(params, st.attn_local, d_out, *grads);

    Vec d_cls = d_seq.row(0).transpose();
    Mat d_prompt = Mat::Zero(pl, d);
    Mat d_pt;
    if (options.use_prompts) {
      d_prompt = d_seq.middleRows(1, pl);
      d_pt = d_seq.bottomRows(st.pt.rows());
    } else {
      d_pt = d_seq.bottomRows(st.pt.rows());
    }

    // Global-prompt route: the broadcast prompts are constants.
    if (st.has_global) {
      Vec d_logits_g = w_gpl * gpl_loss_grad(st.logits_global, bs.sample.label);
      grads->clf_w += d_logits_g * st.attn_global.out.row(0);
      grads->clf_b += d_logits_g;
      Mat d_out_g = Mat::Zero(st.attn_global.out.rows(), st.attn_global.out.cols());
      d_out_g.row(0) = (params.clf_w.transpose() * d_logits_g).transpose();
      Mat d_seq_g = attention_backward(params, st.attn_global, d_out_g, *grads);
      d_cls += d_seq_g.row(0).transpose();
      d_pt += d_seq_g.bottomRows(st.pt.rows());
    }

    // Contrastive route feeds the prompt through its flattened form.
    if (st.contrastive && st.dpcl_weight != 0.0)
      d_prompt += unflatten_prompt(st.dpcl_weight * st.dpcl.anchor_grad, pl, d);

    if (options.use_prompts) {
      Mat d_base = cdap_backward(params, st.cdap, d_prompt, *grads);
      d_cls += d_base.row(0).transpose();
      d_pt += d_base.bottomRows(st.pt.rows());
    }

    grads->cls_token += d_cls;
    Vec d_feat = patch_tokens_backward(params, d_pt);
    extractor_backward(params, st.ext, d_feat, *grads);
  }
  return stats;
}

}  // namespace reffil
