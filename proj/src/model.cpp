#include "fedseq/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>

#include "fedseq/rng.hpp"

namespace fedseq {

namespace {

constexpr double kLnEpsilon = 1e-5;
constexpr double kInitStd = 0.02;
constexpr double kMaskFill = -1e9;

template <typename T>
T gelu(T x) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T a = T(0.044715);
  T u = c * (x + a * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
  const T c = T(0.7978845608028654);
  const T a = T(0.044715);
  T x2 = x * x;
  T u = c * (x + a * x * x2);
  T th = std::tanh(u);
  T sech2 = T(1) - th * th;
  return T(0.5) * (T(1) + th) + T(0.5) * x * sech2 * c * (T(1) + T(3) * a * x2);
}

template <typename T>
void layernorm_forward(const Mat<T>& x, const Mat<T>& gain, const Mat<T>& bias, Mat<T>& y,
                       Mat<T>& xhat, std::vector<T>& rstd) {
  const Eigen::Index rows = x.rows(), cols = x.cols();
  y.resize(rows, cols);
  xhat.resize(rows, cols);
  rstd.assign(static_cast<std::size_t>(rows), T(0));
  for (Eigen::Index r = 0; r < rows; ++r) {
    auto row = x.row(r).array();
    T mu = row.mean();
    T var = (row - mu).square().sum() / T(cols);
    T rs = T(1) / std::sqrt(var + T(kLnEpsilon));
    rstd[static_cast<std::size_t>(r)] = rs;
    xhat.row(r).array() = (row - mu) * rs;
    y.row(r).array() = xhat.row(r).array() * gain.row(0).array() + bias.row(0).array();
  }
}

// Returns dx; accumulates dgain/dbias.
template <typename T>
Mat<T> layernorm_backward(const Mat<T>& dy, const Mat<T>& xhat, const std::vector<T>& rstd,
                          const Mat<T>& gain, Mat<T>& dgain, Mat<T>& dbias) {
  const Eigen::Index rows = dy.rows(), cols = dy.cols();
  Mat<T> dx(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    auto t = (dy.row(r).array() * gain.row(0).array()).eval();
    T m1 = t.mean();
    T m2 = (t * xhat.row(r).array()).mean();
    dx.row(r).array() = rstd[static_cast<std::size_t>(r)] * (t - m1 - xhat.row(r).array() * m2);
    dgain.row(0).array() += dy.row(r).array() * xhat.row(r).array();
    dbias.row(0).array() += dy.row(r).array();
  }
  return dx;
}

template <typename T>
struct LayerCache {
  Mat<T> ln1_y, ln1_xhat;
  std::vector<T> ln1_rstd;
  Mat<T> q, k, v;
  std::vector<Mat<T>> probs;  // one [len x len] matrix per (sequence, head)
  Mat<T> ctx;
  Mat<T> ln2_y, ln2_xhat;
  std::vector<T> ln2_rstd;
  Mat<T> ffn_pre, ffn_act;
};

template <typename T>
struct ForwardCache {
  Mat<T> emb_xhat;
  std::vector<T> emb_rstd;
  std::vector<LayerCache<T>> layers;
  Mat<T> h_final;
};

void check_lane(const std::vector<std::int32_t>& lane, int limit, const char* what) {
  for (std::int32_t v : lane) {
    if (v < 0 || v >= limit)
      throw std::out_of_range(std::string("forward: ") + what + " id " + std::to_string(v) +
                              " outside [0, " + std::to_string(limit) + ")");
  }
}

template <typename T>
Mat<T> encoder_forward(const ModelParams<T>& p, const Batch& b, ForwardCache<T>* cache) {
  const HyperParams& h = p.hyper;
  if (b.rows <= 0 || b.len != h.max_len)
    throw std::invalid_argument("forward: batch length " + std::to_string(b.len) +
                                " does not match max_len " + std::to_string(h.max_len));
  check_lane(b.tokens, h.vocab, "token");
  check_lane(b.ages, h.age_buckets, "age");
  check_lane(b.years, h.year_buckets, "year");
  check_lane(b.segments, 2, "segment");
  check_lane(b.positions, h.max_len, "position");

  const ParamLayout lo = p.layout();
  const int L = b.len, H = h.hidden, heads = h.heads, dk = H / heads;
  const Eigen::Index bl = static_cast<Eigen::Index>(b.rows) * L;
  const T inv_sqrt_dk = T(1) / std::sqrt(T(dk));

  Mat<T> x(bl, H);
  for (Eigen::Index r = 0; r < bl; ++r) {
    std::size_t rr = static_cast<std::size_t>(r);
    x.row(r) = p.at(ParamLayout::kTok).row(b.tokens[rr]) +
               p.at(ParamLayout::kAge).row(b.ages[rr]) +
               p.at(ParamLayout::kYear).row(b.years[rr]) +
               p.at(ParamLayout::kSeg).row(b.segments[rr]) +
               p.at(ParamLayout::kPos).row(b.positions[rr]);
  }

  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  c.layers.resize(static_cast<std::size_t>(h.layers));

  Mat<T> ln_y;
  layernorm_forward(x, p.at(ParamLayout::kEmbGain), p.at(ParamLayout::kEmbBias), ln_y, c.emb_xhat,
                    c.emb_rstd);
  x = std::move(ln_y);

  for (int l = 0; l < h.layers; ++l) {
    LayerCache<T>& lc = c.layers[static_cast<std::size_t>(l)];
    layernorm_forward(x, p.at(lo.layer(l, ParamLayout::kLn1Gain)),
                      p.at(lo.layer(l, ParamLayout::kLn1Bias)), lc.ln1_y, lc.ln1_xhat,
                      lc.ln1_rstd);

    lc.q.noalias() = lc.ln1_y * p.at(lo.layer(l, ParamLayout::kWq));
    lc.q.rowwise() += p.at(lo.layer(l, ParamLayout::kBq)).row(0);
    lc.k.noalias() = lc.ln1_y * p.at(lo.layer(l, ParamLayout::kWk));
    lc.k.rowwise() += p.at(lo.layer(l, ParamLayout::kBk)).row(0);
    lc.v.noalias() = lc.ln1_y * p.at(lo.layer(l, ParamLayout::kWv));
    lc.v.rowwise() += p.at(lo.layer(l, ParamLayout::kBv)).row(0);

    lc.ctx.resize(bl, H);
    lc.probs.assign(static_cast<std::size_t>(b.rows) * heads, Mat<T>());
    for (int s = 0; s < b.rows; ++s) {
      const Eigen::Index base = static_cast<Eigen::Index>(s) * L;
      for (int hd = 0; hd < heads; ++hd) {
        auto qs = lc.q.block(base, hd * dk, L, dk);
        auto ks = lc.k.block(base, hd * dk, L, dk);
        auto vs = lc.v.block(base, hd * dk, L, dk);
        Mat<T> scores(L, L);
        scores.noalias() = qs * ks.transpose();
        scores *= inv_sqrt_dk;
        for (int j = 0; j < L; ++j) {
          if (b.mask[static_cast<std::size_t>(s) * L + j] == 0)
            scores.col(j).array() += T(kMaskFill);
        }
        for (int i = 0; i < L; ++i) {
          auto row = scores.row(i).array();
          T m = row.maxCoeff();
          row = (row - m).exp();
          row /= row.sum();
        }
        Mat<T>& probs = lc.probs[static_cast<std::size_t>(s) * heads + hd];
        probs = std::move(scores);
        lc.ctx.block(base, hd * dk, L, dk).noalias() = probs * vs;
      }
    }

    Mat<T> attn_y;
    attn_y.noalias() = lc.ctx * p.at(lo.layer(l, ParamLayout::kWo));
    attn_y.rowwise() += p.at(lo.layer(l, ParamLayout::kBo)).row(0);
    Mat<T> x_mid = x + attn_y;

    layernorm_forward(x_mid, p.at(lo.layer(l, ParamLayout::kLn2Gain)),
                      p.at(lo.layer(l, ParamLayout::kLn2Bias)), lc.ln2_y, lc.ln2_xhat,
                      lc.ln2_rstd);
    lc.ffn_pre.noalias() = lc.ln2_y * p.at(lo.layer(l, ParamLayout::kW1));
    lc.ffn_pre.rowwise() += p.at(lo.layer(l, ParamLayout::kB1)).row(0);
    lc.ffn_act = lc.ffn_pre.unaryExpr([](T v) { return gelu(v); });
    Mat<T> ffn_y;
    ffn_y.noalias() = lc.ffn_act * p.at(lo.layer(l, ParamLayout::kW2));
    ffn_y.rowwise() += p.at(lo.layer(l, ParamLayout::kB2)).row(0);

    x = std::move(x_mid);
    x += ffn_y;
  }

  if (cache) cache->h_final = x;
  return x;
}

template <typename T>
Mat<T> head_logits(const ModelParams<T>& p, const Mat<T>& h_final, const Batch& b, Head head) {
  const ParamLayout lo = p.layout();
  if (head == Head::kMlm) {
    Mat<T> logits;
    logits.noalias() = h_final * p.at(lo.mlm_w());
    logits.rowwise() += p.at(lo.mlm_b()).row(0);
    return logits;
  }
  Mat<T> cls(b.rows, p.hyper.hidden);
  for (int s = 0; s < b.rows; ++s)
    cls.row(s) = h_final.row(static_cast<Eigen::Index>(s) * b.len);
  Mat<T> logits;
  logits.noalias() = cls * p.at(lo.next_w());
  logits.rowwise() += p.at(lo.next_b()).row(0);
  return logits;
}

// Backprop from d(h_final) through the encoder stack and embeddings.
template <typename T>
void encoder_backward(const ModelParams<T>& p, const Batch& b, const ForwardCache<T>& c,
                      Mat<T> dx, ParamGradients<T>& g) {
  const HyperParams& h = p.hyper;
  const ParamLayout lo = p.layout();
  const int L = b.len, H = h.hidden, heads = h.heads, dk = H / heads;
  const Eigen::Index bl = static_cast<Eigen::Index>(b.rows) * L;
  const T inv_sqrt_dk = T(1) / std::sqrt(T(dk));

  for (int l = h.layers - 1; l >= 0; --l) {
    const LayerCache<T>& lc = c.layers[static_cast<std::size_t>(l)];

    // FFN branch
    Mat<T> dact;
    dact.noalias() = dx * p.at(lo.layer(l, ParamLayout::kW2)).transpose();
    g.at(lo.layer(l, ParamLayout::kW2)).noalias() += lc.ffn_act.transpose() * dx;
    g.at(lo.layer(l, ParamLayout::kB2)).row(0) += dx.colwise().sum();
    Mat<T> dpre = dact.cwiseProduct(lc.ffn_pre.unaryExpr([](T v) { return gelu_grad(v); }));
    g.at(lo.layer(l, ParamLayout::kW1)).noalias() += lc.ln2_y.transpose() * dpre;
    g.at(lo.layer(l, ParamLayout::kB1)).row(0) += dpre.colwise().sum();
    Mat<T> du;
    du.noalias() = dpre * p.at(lo.layer(l, ParamLayout::kW1)).transpose();
    dx += layernorm_backward(du, lc.ln2_xhat, lc.ln2_rstd, p.at(lo.layer(l, ParamLayout::kLn2Gain)),
                             g.at(lo.layer(l, ParamLayout::kLn2Gain)),
                             g.at(lo.layer(l, ParamLayout::kLn2Bias)));

    // attention branch; dx now holds d(x_mid)
    Mat<T> dctx;
    dctx.noalias() = dx * p.at(lo.layer(l, ParamLayout::kWo)).transpose();
    g.at(lo.layer(l, ParamLayout::kWo)).noalias() += lc.ctx.transpose() * dx;
    g.at(lo.layer(l, ParamLayout::kBo)).row(0) += dx.colwise().sum();

    Mat<T> dq = Mat<T>::Zero(bl, H), dk_mat = Mat<T>::Zero(bl, H), dv = Mat<T>::Zero(bl, H);
    for (int s = 0; s < b.rows; ++s) {
      const Eigen::Index base = static_cast<Eigen::Index>(s) * L;
      for (int hd = 0; hd < heads; ++hd) {
        const Mat<T>& probs = lc.probs[static_cast<std::size_t>(s) * heads + hd];
        auto dctx_s = dctx.block(base, hd * dk, L, dk);
        auto vs = lc.v.block(base, hd * dk, L, dk);
        Mat<T> dprobs;
        dprobs.noalias() = dctx_s * vs.transpose();
        dv.block(base, hd * dk, L, dk).noalias() = probs.transpose() * dctx_s;
        Mat<T> dscores(L, L);
        for (int i = 0; i < L; ++i) {
          T dot = (dprobs.row(i).array() * probs.row(i).array()).sum();
          dscores.row(i).array() = (dprobs.row(i).array() - dot) * probs.row(i).array();
        }
        dscores *= inv_sqrt_dk;
        dq.block(base, hd * dk, L, dk).noalias() = dscores * lc.k.block(base, hd * dk, L, dk);
        dk_mat.block(base, hd * dk, L, dk).noalias() =
            dscores.transpose() * lc.q.block(base, hd * dk, L, dk);
      }
    }

    g.at(lo.layer(l, ParamLayout::kWq)).noalias() += lc.ln1_y.transpose() * dq;
    g.at(lo.layer(l, ParamLayout::kBq)).row(0) += dq.colwise().sum();
    g.at(lo.layer(l, ParamLayout::kWk)).noalias() += lc.ln1_y.transpose() * dk_mat;
    g.at(lo.layer(l, ParamLayout::kBk)).row(0) += dk_mat.colwise().sum();
    g.at(lo.layer(l, ParamLayout::kWv)).noalias() += lc.ln1_y.transpose() * dv;
    g.at(lo.layer(l, ParamLayout::kBv)).row(0) += dv.colwise().sum();

    Mat<T> dx1;
    dx1.noalias() = dq * p.at(lo.layer(l, ParamLayout::kWq)).transpose();
    dx1.noalias() += dk_mat * p.at(lo.layer(l, ParamLayout::kWk)).transpose();
    dx1.noalias() += dv * p.at(lo.layer(l, ParamLayout::kWv)).transpose();
    dx += layernorm_backward(dx1, lc.ln1_xhat, lc.ln1_rstd, p.at(lo.layer(l, ParamLayout::kLn1Gain)),
                             g.at(lo.layer(l, ParamLayout::kLn1Gain)),
                             g.at(lo.layer(l, ParamLayout::kLn1Bias)));
  }

  Mat<T> demb = layernorm_backward(dx, c.emb_xhat, c.emb_rstd, p.at(ParamLayout::kEmbGain),
                                   g.at(ParamLayout::kEmbGain), g.at(ParamLayout::kEmbBias));
  for (Eigen::Index r = 0; r < bl; ++r) {
    std::size_t rr = static_cast<std::size_t>(r);
    g.at(ParamLayout::kTok).row(b.tokens[rr]) += demb.row(r);
    g.at(ParamLayout::kAge).row(b.ages[rr]) += demb.row(r);
    g.at(ParamLayout::kYear).row(b.years[rr]) += demb.row(r);
    g.at(ParamLayout::kSeg).row(b.segments[rr]) += demb.row(r);
    g.at(ParamLayout::kPos).row(b.positions[rr]) += demb.row(r);
  }
}

// Loss and dlogits for the MLM head in one pass.
template <typename T>
double mlm_loss_grad(const Mat<T>& logits, const MlmTargets& targets, int len, Mat<T>* dlogits) {
  if (targets.size() == 0) throw std::invalid_argument("mlm_loss: no masked positions");
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  const double inv_m = 1.0 / static_cast<double>(targets.size());
  double loss_sum = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const Eigen::Index row =
        static_cast<Eigen::Index>(targets.seq_index[t]) * len + targets.position[t];
    if (row < 0 || row >= logits.rows())
      throw std::out_of_range("mlm_loss: target outside the batch");
    const std::int32_t tok = targets.token[t];
    if (tok < 0 || tok >= logits.cols())
      throw std::out_of_range("mlm_loss: target token outside the vocabulary");
    const auto r = logits.row(row).template cast<double>().eval();
    double m = r.maxCoeff();
    double denom = (r.array() - m).exp().sum();
    loss_sum += std::log(denom) + m - r(tok);
    if (dlogits) {
      for (Eigen::Index i = 0; i < logits.cols(); ++i)
        (*dlogits)(row, i) = static_cast<T>(std::exp(r(i) - m) / denom * inv_m);
      (*dlogits)(row, tok) -= static_cast<T>(inv_m);
    }
  }
  return loss_sum * inv_m;
}

template <typename T>
double nextvisit_loss_grad(const Mat<T>& logits, const Mat<T>& labels, Mat<T>* dlogits) {
  if (logits.rows() != labels.rows() || logits.cols() != labels.cols())
    throw std::invalid_argument("nextvisit_loss: logits and labels shapes differ");
  if (logits.size() == 0) throw std::invalid_argument("nextvisit_loss: empty batch");
  if (dlogits) dlogits->resize(logits.rows(), logits.cols());
  const double inv_n = 1.0 / static_cast<double>(logits.size());
  double loss_sum = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      double z = static_cast<double>(logits(r, c));
      double y = static_cast<double>(labels(r, c));
      if (y != 0.0 && y != 1.0)
        throw std::invalid_argument("nextvisit_loss: labels must be 0 or 1");
      loss_sum += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
      if (dlogits) {
        double sig = 1.0 / (1.0 + std::exp(-z));
        (*dlogits)(r, c) = static_cast<T>((sig - y) * inv_n);
      }
    }
  }
  return loss_sum * inv_n;
}

}  // namespace

std::vector<TensorSpec> tensor_specs(const HyperParams& h) {
  using K = TensorSpec::Kind;
  std::vector<TensorSpec> specs;
  specs.push_back({"emb.tok", h.vocab, h.hidden, K::kWeight});
  specs.push_back({"emb.age", h.age_buckets, h.hidden, K::kWeight});
  specs.push_back({"emb.year", h.year_buckets, h.hidden, K::kWeight});
  specs.push_back({"emb.seg", 2, h.hidden, K::kWeight});
  specs.push_back({"emb.pos", h.max_len, h.hidden, K::kWeight});
  specs.push_back({"emb.ln.gain", 1, h.hidden, K::kGain});
  specs.push_back({"emb.ln.bias", 1, h.hidden, K::kBias});
  for (int l = 0; l < h.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    specs.push_back({p + "ln1.gain", 1, h.hidden, K::kGain});
    specs.push_back({p + "ln1.bias", 1, h.hidden, K::kBias});
    specs.push_back({p + "attn.wq", h.hidden, h.hidden, K::kWeight});
    specs.push_back({p + "attn.bq", 1, h.hidden, K::kBias});
    specs.push_back({p + "attn.wk", h.hidden, h.hidden, K::kWeight});
    specs.push_back({p + "attn.bk", 1, h.hidden, K::kBias});
    specs.push_back({p + "attn.wv", h.hidden, h.hidden, K::kWeight});
    specs.push_back({p + "attn.bv", 1, h.hidden, K::kBias});
    specs.push_back({p + "attn.wo", h.hidden, h.hidden, K::kWeight});
    specs.push_back({p + "attn.bo", 1, h.hidden, K::kBias});
    specs.push_back({p + "ln2.gain", 1, h.hidden, K::kGain});
    specs.push_back({p + "ln2.bias", 1, h.hidden, K::kBias});
    specs.push_back({p + "ffn.w1", h.hidden, h.ffn_dim, K::kWeight});
    specs.push_back({p + "ffn.b1", 1, h.ffn_dim, K::kBias});
    specs.push_back({p + "ffn.w2", h.ffn_dim, h.hidden, K::kWeight});
    specs.push_back({p + "ffn.b2", 1, h.hidden, K::kBias});
  }
  specs.push_back({"head.mlm.w", h.hidden, h.vocab, K::kWeight});
  specs.push_back({"head.mlm.b", 1, h.vocab, K::kBias});
  specs.push_back({"head.next.w", h.hidden, h.groups, K::kWeight});
  specs.push_back({"head.next.b", 1, h.groups, K::kBias});
  return specs;
}

template <typename T>
ModelParams<T>::ModelParams(const HyperParams& h) : hyper(h) {
  h.validate();
  const auto specs = tensor_specs(h);
  tensors.reserve(specs.size());
  for (const TensorSpec& s : specs) tensors.push_back(Mat<T>::Zero(s.rows, s.cols));
}

template <typename T>
void ModelParams<T>::set_zero() {
  for (Mat<T>& t : tensors) t.setZero();
}

template <typename T>
bool ModelParams<T>::congruent_with(const ModelParams& other) const {
  if (tensors.size() != other.tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].rows() != other.tensors[i].rows() ||
        tensors[i].cols() != other.tensors[i].cols())
      return false;
  }
  return true;
}

template <typename T>
ModelParams<T> init_params(const HyperParams& hyper, std::uint64_t seed) {
  ModelParams<T> params(hyper);
  Rng rng(substream(seed, Stream::kInit));
  const auto specs = tensor_specs(hyper);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    Mat<T>& t = params.tensors[i];
    switch (specs[i].kind) {
      case TensorSpec::Kind::kWeight:
        for (Eigen::Index r = 0; r < t.rows(); ++r)
          for (Eigen::Index c = 0; c < t.cols(); ++c) {
            double v = rng.normal() * kInitStd;
            t(r, c) = static_cast<T>(std::clamp(v, -2.0 * kInitStd, 2.0 * kInitStd));
          }
        break;
      case TensorSpec::Kind::kBias:
        break;  // already zero
      case TensorSpec::Kind::kGain:
        t.setOnes();
        break;
    }
  }
  return params;
}

Batch Batch::from(std::span<const InputSequence> sequences) {
  std::vector<const InputSequence*> ptrs;
  ptrs.reserve(sequences.size());
  for (const InputSequence& s : sequences) ptrs.push_back(&s);
  return Batch::from(std::span<const InputSequence* const>(ptrs));
}

Batch Batch::from(std::span<const InputSequence* const> sequences) {
  if (sequences.empty()) throw std::invalid_argument("batch: no sequences");
  Batch b;
  b.rows = static_cast<int>(sequences.size());
  b.len = sequences[0]->length();
  const std::size_t total = static_cast<std::size_t>(b.rows) * b.len;
  b.tokens.reserve(total);
  b.ages.reserve(total);
  b.years.reserve(total);
  b.segments.reserve(total);
  b.positions.reserve(total);
  b.mask.reserve(total);
  for (const InputSequence* s : sequences) {
    if (s->length() != b.len) throw std::invalid_argument("batch: mixed sequence lengths");
    b.tokens.insert(b.tokens.end(), s->token_ids.begin(), s->token_ids.end());
    b.ages.insert(b.ages.end(), s->age_ids.begin(), s->age_ids.end());
    b.years.insert(b.years.end(), s->year_ids.begin(), s->year_ids.end());
    b.segments.insert(b.segments.end(), s->segment_ids.begin(), s->segment_ids.end());
    b.positions.insert(b.positions.end(), s->position_ids.begin(), s->position_ids.end());
    b.mask.insert(b.mask.end(), s->attention_mask.begin(), s->attention_mask.end());
  }
  return b;
}

template <typename T>
Mat<T> forward(const ModelParams<T>& params, const Batch& batch, Head head) {
  Mat<T> h_final = encoder_forward<T>(params, batch, nullptr);
  return head_logits(params, h_final, batch, head);
}

template <typename T>
double mlm_loss(const Mat<T>& logits, const MlmTargets& targets, int len) {
  return mlm_loss_grad<T>(logits, targets, len, nullptr);
}

template <typename T>
double nextvisit_loss(const Mat<T>& logits, const Mat<T>& labels) {
  return nextvisit_loss_grad<T>(logits, labels, nullptr);
}

template <typename T>
BackwardResult<T> backward(const ModelParams<T>& params, const Batch& batch,
                           const MlmTargets& targets) {
  ForwardCache<T> cache;
  encoder_forward<T>(params, batch, &cache);
  Mat<T> logits = head_logits(params, cache.h_final, batch, Head::kMlm);

  BackwardResult<T> out;
  out.grads = ParamGradients<T>(params.hyper);
  Mat<T> dlogits;
  out.loss = mlm_loss_grad<T>(logits, targets, batch.len, &dlogits);

  const ParamLayout lo = params.layout();
  Mat<T> dh;
  dh.noalias() = dlogits * params.at(lo.mlm_w()).transpose();
  out.grads.at(lo.mlm_w()).noalias() += cache.h_final.transpose() * dlogits;
  out.grads.at(lo.mlm_b()).row(0) += dlogits.colwise().sum();
  encoder_backward(params, batch, cache, std::move(dh), out.grads);
  return out;
}

template <typename T>
BackwardResult<T> backward(const ModelParams<T>& params, const Batch& batch,
                           const Mat<T>& labels) {
  ForwardCache<T> cache;
  encoder_forward<T>(params, batch, &cache);
  Mat<T> logits = head_logits(params, cache.h_final, batch, Head::kNextVisit);

  BackwardResult<T> out;
  out.grads = ParamGradients<T>(params.hyper);
  Mat<T> dlogits;
  out.loss = nextvisit_loss_grad<T>(logits, labels, &dlogits);

  const ParamLayout lo = params.layout();
  Mat<T> cls(batch.rows, params.hyper.hidden);
  for (int s = 0; s < batch.rows; ++s)
    cls.row(s) = cache.h_final.row(static_cast<Eigen::Index>(s) * batch.len);
  Mat<T> dcls;
  dcls.noalias() = dlogits * params.at(lo.next_w()).transpose();
  out.grads.at(lo.next_w()).noalias() += cls.transpose() * dlogits;
  out.grads.at(lo.next_b()).row(0) += dlogits.colwise().sum();

  Mat<T> dh = Mat<T>::Zero(static_cast<Eigen::Index>(batch.rows) * batch.len,
                           params.hyper.hidden);
  for (int s = 0; s < batch.rows; ++s)
    dh.row(static_cast<Eigen::Index>(s) * batch.len) = dcls.row(s);
  encoder_backward(params, batch, cache, std::move(dh), out.grads);
  return out;
}

template <typename T>
void adam_step(ModelParams<T>& params, const ParamGradients<T>& grads, AdamState<T>& state,
               const HyperParams& hyper) {
  if (!params.congruent_with(grads) || !params.congruent_with(state.first_moment))
    throw std::invalid_argument("adam: parameter and gradient shapes differ");
  const auto specs = tensor_specs(params.hyper);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (!grads.tensors[i].allFinite())
      throw std::runtime_error("adam: non-finite gradient in tensor " + specs[i].name);
  }
  state.step += 1;
  const T lr = static_cast<T>(hyper.learning_rate);
  const T b1 = static_cast<T>(hyper.beta1);
  const T b2 = static_cast<T>(hyper.beta2);
  const T eps = static_cast<T>(hyper.epsilon);
  const T bc1 = T(1) - static_cast<T>(std::pow(hyper.beta1, static_cast<double>(state.step)));
  const T bc2 = T(1) - static_cast<T>(std::pow(hyper.beta2, static_cast<double>(state.step)));
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto& m = state.first_moment.tensors[i];
    auto& v = state.second_moment.tensors[i];
    const auto& g = grads.tensors[i];
    m = b1 * m + (T(1) - b1) * g;
    v.array() = b2 * v.array() + (T(1) - b2) * g.array().square();
    params.tensors[i].array() -=
        lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
  }
}

template <typename T>
double max_abs_diff(const ModelParams<T>& a, const ModelParams<T>& b) {
  if (!a.congruent_with(b)) throw std::invalid_argument("max_abs_diff: shapes differ");
  double out = 0.0;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    double d = (a.tensors[i] - b.tensors[i]).template cast<double>().cwiseAbs().maxCoeff();
    out = std::max(out, d);
  }
  return out;
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;

template ModelParams<float> init_params<float>(const HyperParams&, std::uint64_t);
template ModelParams<double> init_params<double>(const HyperParams&, std::uint64_t);
template Mat<float> forward<float>(const ModelParams<float>&, const Batch&, Head);
template Mat<double> forward<double>(const ModelParams<double>&, const Batch&, Head);
template double mlm_loss<float>(const Mat<float>&, const MlmTargets&, int);
template double mlm_loss<double>(const Mat<double>&, const MlmTargets&, int);
template double nextvisit_loss<float>(const Mat<float>&, const Mat<float>&);
template double nextvisit_loss<double>(const Mat<double>&, const Mat<double>&);
template BackwardResult<float> backward<float>(const ModelParams<float>&, const Batch&,
                                               const MlmTargets&);
template BackwardResult<double> backward<double>(const ModelParams<double>&, const Batch&,
                                                 const MlmTargets&);
template BackwardResult<float> backward<float>(const ModelParams<float>&, const Batch&,
                                               const Mat<float>&);
template BackwardResult<double> backward<double>(const ModelParams<double>&, const Batch&,
                                                 const Mat<double>&);
template void adam_step<float>(ModelParams<float>&, const ParamGradients<float>&,
                               AdamState<float>&, const HyperParams&);
template void adam_step<double>(ModelParams<double>&, const ParamGradients<double>&,
                                AdamState<double>&, const HyperParams&);
template double max_abs_diff<float>(const ModelParams<float>&, const ModelParams<float>&);
template double max_abs_diff<double>(const ModelParams<double>&, const ModelParams<double>&);

}  // namespace fedseq
