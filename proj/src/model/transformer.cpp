#include "stagechain/model/transformer.hpp"

#include <cmath>
#include <numeric>

#include "stagechain/ad/ops.hpp"
#include "stagechain/errors.hpp"

namespace stagechain::model {

using ad::Tensor;

namespace {

Tensor normal_matrix(ad::Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = rng.normal() * stddev;
  return Tensor::matrix(rows, cols, std::move(v));
}

Tensor ones(std::size_t n) { return Tensor::vector(std::vector<double>(n, 1.0)); }

constexpr double kEmbedStd = 0.05;
constexpr double kPosStd = 0.02;
constexpr double kWeightStd = 0.02;

}  // namespace

Transformer::Transformer(ModelConfig config, std::uint64_t seed)
    : config_(config), seed_(seed) {
  config_.validate();
  ad::Rng rng(seed);
  const std::size_t d = config_.dim, hidden = config_.dim * config_.mlp_ratio;
  tok_embed_ = normal_matrix(rng, config_.vocab_size, d, kEmbedStd);
  pos_embed_ = normal_matrix(rng, config_.max_seq_len, d, kPosStd);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    Block b;
    b.ln1_gain = ones(d);
    b.ln1_bias = Tensor::zeros({d});
    b.wq = normal_matrix(rng, d, d, kWeightStd);
    b.wk = normal_matrix(rng, d, d, kWeightStd);
    b.wv = normal_matrix(rng, d, d, kWeightStd);
    b.wo = normal_matrix(rng, d, d, kWeightStd);
    b.ln2_gain = ones(d);
    b.ln2_bias = Tensor::zeros({d});
    b.w_up = normal_matrix(rng, hidden, d, kWeightStd);
    b.w_down = normal_matrix(rng, d, hidden, kWeightStd);
    blocks_.push_back(std::move(b));
  }
  lnf_gain_ = ones(d);
  lnf_bias_ = Tensor::zeros({d});
  lm_head_ = normal_matrix(rng, config_.vocab_size, d, kWeightStd);
}

Tensor Transformer::embed_ids(std::span<const int> ids, std::size_t first_position) const {
  if (first_position + ids.size() > config_.max_seq_len) {
    throw LengthError("sequence of " + std::to_string(first_position + ids.size()) +
                      " tokens exceeds max_seq_len " + std::to_string(config_.max_seq_len));
  }
  std::vector<int> positions(ids.size());
  std::iota(positions.begin(), positions.end(), static_cast<int>(first_position));
  return ad::add(ad::embedding(tok_embed_, ids), ad::embedding(pos_embed_, positions));
}

Tensor Transformer::embed(const TokenSequence& seq) const { return embed_ids(seq.ids, 0); }

Tensor Transformer::linear(const Tensor& x, const Tensor& weight, const LoraAdapter* adapter,
                           std::size_t layer, LoraTarget target,
                           const ForwardOptions& options) const {
  Tensor y = ad::matmul_nt(x, weight);
  if (adapter == nullptr) return y;
  const LoraPair& p = adapter->pair(layer, target);
  Tensor xin = x;
  if (options.dropout_rng != nullptr) {
    xin = ad::dropout(x, adapter->config().dropout, *options.dropout_rng);
  }
  Tensor delta = ad::matmul_nt(ad::matmul_nt(xin, p.a), p.b);
  return ad::add(y, ad::scale(delta, adapter->config().scaling()));
}

ForwardOutput Transformer::forward(const Tensor& emb, const LoraAdapter* adapter,
                                   ForwardOptions options, KvCache* cache) const {
  if (emb.rank() != 2 || emb.cols() != config_.dim) {
    throw DimensionError("forward: embedding must be L x " + std::to_string(config_.dim));
  }
  if (emb.rows() > config_.max_seq_len) throw LengthError("forward: sequence exceeds max_seq_len");
  const std::size_t heads = config_.n_heads, dh = config_.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (cache != nullptr) {
    cache->keys.assign(config_.n_layers, {});
    cache->values.assign(config_.n_layers, {});
    cache->rows = emb.rows();
  }
  Tensor x = emb;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    Tensor h = ad::layer_norm(x, b.ln1_gain, b.ln1_bias);
    Tensor q = linear(h, b.wq, adapter, l, LoraTarget::q, options);
    Tensor k = linear(h, b.wk, adapter, l, LoraTarget::k, options);
    Tensor v = linear(h, b.wv, adapter, l, LoraTarget::v, options);
    if (cache != nullptr) {
      cache->keys[l].assign(k.data().begin(), k.data().end());
      cache->values[l].assign(v.data().begin(), v.data().end());
    }
    std::vector<Tensor> head_out;
    head_out.reserve(heads);
    for (std::size_t hh = 0; hh < heads; ++hh) {
      Tensor qh = ad::slice_cols(q, hh * dh, dh);
      Tensor kh = ad::slice_cols(k, hh * dh, dh);
      Tensor vh = ad::slice_cols(v, hh * dh, dh);
      Tensor probs = ad::causal_softmax(ad::scale(ad::matmul_nt(qh, kh), attn_scale));
      head_out.push_back(ad::matmul(probs, vh));
    }
    Tensor attn = linear(ad::concat_cols(head_out), b.wo, adapter, l, LoraTarget::o, options);
    x = ad::add(x, attn);
    Tensor h2 = ad::layer_norm(x, b.ln2_gain, b.ln2_bias);
    Tensor up = ad::gelu(linear(h2, b.w_up, adapter, l, LoraTarget::up, options));
    x = ad::add(x, linear(up, b.w_down, adapter, l, LoraTarget::down, options));
  }
  Tensor hidden = ad::layer_norm(x, lnf_gain_, lnf_bias_);
  Tensor logits = ad::matmul_nt(hidden, lm_head_);
  return {std::move(logits), std::move(hidden)};
}

ForwardOutput Transformer::forward_step(const Tensor& emb_row, const LoraAdapter* adapter,
                                        KvCache& cache) const {
  if (emb_row.rank() != 2 || emb_row.rows() != 1 || emb_row.cols() != config_.dim) {
    throw DimensionError("forward_step: expects a 1 x D embedding row");
  }
  if (cache.rows + 1 > config_.max_seq_len) throw LengthError("forward_step: context full");
  const std::size_t d = config_.dim, heads = config_.n_heads, dh = config_.head_dim();
  const std::size_t n = cache.rows + 1;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const ForwardOptions options;
  Tensor x = emb_row;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    Tensor h = ad::layer_norm(x, b.ln1_gain, b.ln1_bias);
    Tensor q = linear(h, b.wq, adapter, l, LoraTarget::q, options);
    Tensor k = linear(h, b.wk, adapter, l, LoraTarget::k, options);
    Tensor v = linear(h, b.wv, adapter, l, LoraTarget::v, options);
    cache.keys[l].insert(cache.keys[l].end(), k.data().begin(), k.data().end());
    cache.values[l].insert(cache.values[l].end(), v.data().begin(), v.data().end());
    Tensor keys = Tensor::matrix(n, d, cache.keys[l]);
    Tensor values = Tensor::matrix(n, d, cache.values[l]);
    std::vector<Tensor> head_out;
    head_out.reserve(heads);
    for (std::size_t hh = 0; hh < heads; ++hh) {
      Tensor qh = ad::slice_cols(q, hh * dh, dh);
      Tensor kh = ad::slice_cols(keys, hh * dh, dh);
      Tensor vh = ad::slice_cols(values, hh * dh, dh);
      Tensor probs = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), attn_scale));
      head_out.push_back(ad::matmul(probs, vh));
    }
    Tensor attn = linear(ad::concat_cols(head_out), b.wo, adapter, l, LoraTarget::o, options);
    x = ad::add(x, attn);
    Tensor h2 = ad::layer_norm(x, b.ln2_gain, b.ln2_bias);
    Tensor up = ad::gelu(linear(h2, b.w_up, adapter, l, LoraTarget::up, options));
    x = ad::add(x, linear(up, b.w_down, adapter, l, LoraTarget::down, options));
  }
  cache.rows = n;
  Tensor hidden = ad::layer_norm(x, lnf_gain_, lnf_bias_);
  Tensor logits = ad::matmul_nt(hidden, lm_head_);
  return {std::move(logits), std::move(hidden)};
}

void Transformer::set_trainable(bool trainable) {
  for (auto& [name, t] : named_parameters()) {
    Tensor handle = t;
    handle.set_requires_grad(trainable);
    if (!trainable) handle.zero_grad();
  }
}

ad::NamedTensors Transformer::named_parameters() const {
  ad::NamedTensors out = {{"tok_embed", tok_embed_}, {"pos_embed", pos_embed_}};
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.gain", b.ln1_gain);
    out.emplace_back(p + "ln1.bias", b.ln1_bias);
    out.emplace_back(p + "wq", b.wq);
    out.emplace_back(p + "wk", b.wk);
    out.emplace_back(p + "wv", b.wv);
    out.emplace_back(p + "wo", b.wo);
    out.emplace_back(p + "ln2.gain", b.ln2_gain);
    out.emplace_back(p + "ln2.bias", b.ln2_bias);
    out.emplace_back(p + "w_up", b.w_up);
    out.emplace_back(p + "w_down", b.w_down);
  }
  out.emplace_back("lnf.gain", lnf_gain_);
  out.emplace_back("lnf.bias", lnf_bias_);
  out.emplace_back("lm_head", lm_head_);
  return out;
}

std::string Transformer::checksum() const { return ad::tensors_checksum(named_parameters()); }

void Transformer::save(const std::filesystem::path& dir, const nlohmann::json& extra) const {
  nlohmann::json prov = extra;
  prov["kind"] = "backbone";
  prov["init_seed"] = seed_;
  prov["model"] = config_;
  ad::save_checkpoint(dir, named_parameters(), prov);
}

Transformer Transformer::load(const std::filesystem::path& dir) {
  ad::Checkpoint ckpt = ad::load_checkpoint(dir);
  if (ckpt.provenance.value("kind", "") != "backbone") {
    throw DataError(dir.string() + " is not a backbone checkpoint");
  }
  Transformer model(ckpt.provenance.at("model").get<ModelConfig>(),
                    ckpt.provenance.at("init_seed").get<std::uint64_t>());
  ad::restore_into(ckpt, model.named_parameters());
  return model;
}

}  // namespace stagechain::model
