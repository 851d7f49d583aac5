#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "reffil/data.hpp"
#include "reffil/losses.hpp"
#include "reffil/prompts.hpp"

namespace reffil {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct ModelConfig {
  int input_dim = 16;
  int n_tokens = 4;
  int token_dim = 8;
  int prompt_len = 2;
  int heads = 2;
  int key_dim = 8;
  int n_classes = 6;

  int extractor_hidden() const { return n_tokens * token_dim; }
  int cdap_hidden() const { return n_tokens + 1; }
  int head_dim() const { return token_dim / heads; }

  void validate() const;  // throws std::invalid_argument
  bool operator==(const ModelConfig&) const = default;
};

struct TensorInfo {
  std::string name;
  bool trainable = false;
  bool aggregate = false;
};

/// Every tensor of the classification backbone plus the prompt generator.
/// for_each_tensor enumerates them in the canonical order used for
/// aggregation and checkpoints; task keys come last, sorted by task id, and
/// are the only tensors excluded from aggregation. The patch tokenizer is
/// frozen after initialization.
struct ModelParams {
  ModelConfig cfg;
  uint64_t key_init_seed = 0;  // shared so replicas create identical new keys

  // feature extractor h: input_dim -> hidden -> n*d, tanh between
  Mat ext_w1, ext_w2;
  Vec ext_b1, ext_b2;
  // frozen tokenizer: (n*d) x (n*d) reshaping matrix
  Mat tok_w;
  // trainable [CLS] token
  Vec cls_token;
  // attention block: MHSA -> LN -> MLP -> skip -> LN
  Mat att_wq, att_wk, att_wv, att_wo;
  Vec att_bq, att_bk, att_bv, att_bo;
  Vec ln1_g, ln1_b, ln2_g, ln2_b;
  Mat mlp_w1, mlp_w2;
  Vec mlp_b1, mlp_b2;
  // classifier on the final [CLS] position
  Mat clf_w;
  Vec clf_b;
  // prompt generator: LN -> token-axis MLP -> CCDA -> FiLM
  Vec cdap_ln_g, cdap_ln_b;
  Mat cdap_mlp_w1, cdap_mlp_w2;
  Vec cdap_mlp_b1, cdap_mlp_b2;
  Mat cdap_ccda_w;
  Vec cdap_ccda_b;
  Mat cdap_phi_w;
  Vec cdap_phi_b;
  // task-conditioned key embeddings, training-time only, never aggregated
  std::map<int, Vec> task_keys;

  static ModelParams init(const ModelConfig& cfg, uint64_t seed);

  /// Same shapes and key set, all values zero (gradient accumulator).
  ModelParams zeros_like() const;

  /// Creates the key for task_id if missing, deterministically from
  /// key_init_seed, so any replica creates the same initial key.
  void ensure_task_key(int task_id);

  bool has_task_key(int task_id) const { return task_keys.count(task_id) > 0; }

  /// Default key used when no task id is available: the mean of all task
  /// embeddings seen so far (zero vector when none exist).
  Vec inference_key() const;

  std::size_t scalar_count() const;

  template <typename F>
  void for_each_tensor(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    visit(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    auto emit = [&](const char* name, auto& tensor, bool trainable, bool aggregate) {
      f(TensorInfo{name, trainable, aggregate}, tensor);
    };
    emit("ext.w1", self.ext_w1, true, true);
    emit("ext.b1", self.ext_b1, true, true);
    emit("ext.w2", self.ext_w2, true, true);
    emit("ext.b2", self.ext_b2, true, true);
    emit("tokenizer.w", self.tok_w, false, false);
    emit("cls_token", self.cls_token, true, true);
    emit("attn.wq", self.att_wq, true, true);
    emit("attn.bq", self.att_bq, true, true);
    emit("attn.wk", self.att_wk, true, true);
    emit("attn.bk", self.att_bk, true, true);
    emit("attn.wv", self.att_wv, true, true);
    emit("attn.bv", self.att_bv, true, true);
    emit("attn.wo", self.att_wo, true, true);
    emit("attn.bo", self.att_bo, true, true);
    emit("attn.ln1.g", self.ln1_g, true, true);
    emit("attn.ln1.b", self.ln1_b, true, true);
    emit("attn.mlp.w1", self.mlp_w1, true, true);
    emit("attn.mlp.b1", self.mlp_b1, true, true);
    emit("attn.mlp.w2", self.mlp_w2, true, true);
    emit("attn.mlp.b2", self.mlp_b2, true, true);
    emit("attn.ln2.g", self.ln2_g, true, true);
    emit("attn.ln2.b", self.ln2_b, true, true);
    emit("classifier.w", self.clf_w, true, true);
    emit("classifier.b", self.clf_b, true, true);
    emit("cdap.ln.g", self.cdap_ln_g, true, true);
    emit("cdap.ln.b", self.cdap_ln_b, true, true);
    emit("cdap.mlp.w1", self.cdap_mlp_w1, true, true);
    emit("cdap.mlp.b1", self.cdap_mlp_b1, true, true);
    emit("cdap.mlp.w2", self.cdap_mlp_w2, true, true);
    emit("cdap.mlp.b2", self.cdap_mlp_b2, true, true);
    emit("cdap.ccda.w", self.cdap_ccda_w, true, true);
    emit("cdap.ccda.b", self.cdap_ccda_b, true, true);
    emit("cdap.phi.w", self.cdap_phi_w, true, true);
    emit("cdap.phi.b", self.cdap_phi_b, true, true);
    for (auto& [task_id, key] : self.task_keys)
      f(TensorInfo{"cdap.key." + std::to_string(task_id), true, false}, key);
  }
};

/// Sample-count-weighted average of the aggregation-eligible tensors.
/// Non-aggregated tensors (task keys, the frozen tokenizer) are copied from
/// the first update. Throws on an empty list or mismatched manifests.
ModelParams fedavg(const std::vector<std::pair<const ModelParams*, std::size_t>>& updates);

/// Copies every aggregation-eligible tensor of `aggregated` into `dst`,
/// leaving dst's local tensors (task keys) untouched.
void apply_aggregate(ModelParams& dst, const ModelParams& aggregated);

/// Plain SGD: p -= lr * g for every trainable tensor (task keys included).
void sgd_step(ModelParams& params, const ModelParams& grads, double lr);

// ---------------------------------------------------------------------------
// Forward caches (kept for the hand-written backward pass).

struct LnCache {
  Mat xhat;
  Vec inv_std;
};

struct AttnCache {
  Mat input;
  Mat q, k, v;
  std::vector<Mat> probs;  // per-head row-softmax attention weights
  Mat heads_concat;
  Mat mhsa;
  LnCache ln1;
  Mat ip;
  Mat mlp_a1;
  Mat iq;
  Mat sum;
  LnCache ln2;
  Mat out;
};

struct ExtractorCache {
  Vec x, a1, feat;
};

struct CdapCache {
  int task_id = -1;  // -1 marks the inference-time default key
  Vec key;
  LnCache ln;
  Mat ln_out;        // (n+1, d)
  Mat z;             // (d, n+1)
  Mat a1;            // (d, cdap_hidden)
  Mat b;             // (d, p) MLP output
  Mat c;             // (d, p) after CCDA
  Vec alpha, lambda; // FiLM parameters from phi(key)
  Mat prompt;        // (p, d)
};

// ---------------------------------------------------------------------------
// Stateless forward surface.

/// [CLS; PT_1..PT_n]: frozen linear reshape of the extracted features with
/// the trainable CLS token prepended.
Mat tokenize(const ModelParams& p, const Vec& x);

/// LN(LN(MHSA(I)) + MLP(LN(MHSA(I)))); sequence length preserved.
Mat attention_block(const ModelParams& p, const Mat& tokens);

struct ForwardResult {
  Vec logits;
  std::optional<Vec> prompt_flat;  // set when the prompt came from the generator
};

/// Full pipeline with optional prompt rows inserted between CLS and the
/// patch tokens. Prompts are treated as constant inputs here.
ForwardResult forward(const ModelParams& p, const Vec& x,
                      const std::optional<Mat>& prompts = std::nullopt);

/// Pipeline with a generator-produced prompt; task_id == nullopt selects the
/// inference-time default key.
ForwardResult forward_with_generator(const ModelParams& p, const Vec& x,
                                     std::optional<int> task_id);

/// Instance-level prompt from the token sequence and the task key
/// (training mode). Throws when the key for task_id does not exist.
Mat generate_prompt(const ModelParams& p, const Mat& tokens, int task_id);

/// Inference-time variant using the default key policy.
Mat generate_prompt_inference(const ModelParams& p, const Mat& tokens);

/// Row-major flattening (p, d) -> p*d and its inverse.
Vec flatten_prompt(const Mat& prompt);
Mat unflatten_prompt(const Vec& flat, int rows, int cols);

/// Stacks each class's averaged global prompt (ascending class id) into a
/// prompt block of shape (n_classes_present * p, d).
Mat global_prompt_block(const GlobalPromptSet& set, int prompt_len, int token_dim);

int predict(const ModelParams& p, const Vec& x, bool use_prompts);
double evaluate_accuracy(const ModelParams& p, const std::vector<LabeledSample>& test_set,
                         bool use_prompts);

// ---------------------------------------------------------------------------
// Cached forward + backward building blocks (exposed for tests).

ExtractorCache extractor_forward(const ModelParams& p, const Vec& x);
Mat patch_tokens(const ModelParams& p, const Vec& feat);
AttnCache attention_forward(const ModelParams& p, const Mat& seq);
CdapCache cdap_forward(const ModelParams& p, const Mat& tokens, std::optional<int> task_id);
Vec classify(const ModelParams& p, const Vec& cls_out);

Mat attention_backward(const ModelParams& p, const AttnCache& cache, const Mat& d_out,
                       ModelParams& grads);
Mat cdap_backward(const ModelParams& p, const CdapCache& cache, const Mat& d_prompt,
                  ModelParams& grads);
Vec patch_tokens_backward(const ModelParams& p, const Mat& d_pt);
void extractor_backward(const ModelParams& p, const ExtractorCache& cache, const Vec& d_feat,
                        ModelParams& grads);

// ---------------------------------------------------------------------------
// Training objective over a batch.

struct BatchSample {
  LabeledSample sample;
  int task_id = 1;
};

struct TrainOptions {
  bool use_prompts = true;  // false selects the prompt-free finetune pipeline
  bool use_gpl = true;
  bool use_dpcl = true;
  double tau_prime = 0.72;
  ClientGroup group = ClientGroup::New;
};

struct BatchStats {
  double ce = 0.0, gpl = 0.0, dpcl = 0.0;
  int count = 0;
  double total() const { return ce + gpl + dpcl; }
};

/// Mean CE over the batch, mean GPL over the batch (zero when the global set
/// is empty or disabled), contrastive loss averaged per class over the
/// classes present, summed into one objective. When `grads` is non-null the
/// full backward pass accumulates into it; when `prompt_sink` is non-null
/// each instance prompt is appended under its label.
BatchStats train_loss_and_grads(const ModelParams& params, const std::vector<BatchSample>& batch,
                                const GlobalPromptSet& global_set, const TrainOptions& options,
                                ModelParams* grads,
                                std::map<int, std::vector<Vec>>* prompt_sink = nullptr);

}  // namespace reffil
