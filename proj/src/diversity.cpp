#include "lens/diversity.hpp"

#include <algorithm>
#include <cmath>

#include <spdlog/spdlog.h>

#include "lens/errors.hpp"
#include "lens/linalg.hpp"

namespace lens {

namespace {

Tensor<double> top_left_vectors(const Tensor<double>& w, std::size_t top_k) {
  const auto svd = svd_jacobi(w);
  const std::size_t m = svd.u.dim(0), k = std::min(top_k, svd.u.dim(1));
  Tensor<double> out(Shape{m, k});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < k; ++j) out.at(i, j) = svd.u.at(i, j);
  }
  return out;
}

/// |u_a . v_b| for unit columns.
Tensor<double> abs_cos(const Tensor<double>& u, const Tensor<double>& v) {
  Tensor<double> s(Shape{u.dim(1), v.dim(1)});
  for (std::size_t a = 0; a < u.dim(1); ++a) {
    for (std::size_t b = 0; b < v.dim(1); ++b) {
      double dot = 0.0;
      for (std::size_t i = 0; i < u.dim(0); ++i) dot += u.at(i, a) * v.at(i, b);
      s.at(a, b) = std::abs(dot);
    }
  }
  return s;
}

template <typename T>
Tensor<double> to_double(const Tensor<T>& t) {
  return t.template cast<double>();
}

void require_members(const std::vector<std::vector<Tensor<double>>>& members, const char* what) {
  if (members.size() < 2) throw DomainError(std::string(what) + " needs at least 2 members");
  for (const auto& m : members) {
    if (m.size() != members[0].size()) throw DimensionError(std::string(what) + ": members differ in layer count");
  }
}

}  // namespace

double disagreement_rate(std::span<const int> preds_i, std::span<const int> preds_j) {
  if (preds_i.size() != preds_j.size()) throw DimensionError("disagreement_rate: length mismatch");
  if (preds_i.empty()) throw UndefinedError("disagreement of empty predictions");
  std::size_t diff = 0;
  for (std::size_t n = 0; n < preds_i.size(); ++n) diff += preds_i[n] != preds_j[n];
  return static_cast<double>(diff) / static_cast<double>(preds_i.size());
}

double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw DimensionError("jsd: distributions must have equal nonzero length");
  auto check = [](std::span<const double> d) {
    double s = 0.0;
    for (double v : d) {
      if (!(v >= 0.0)) throw DomainError("jsd: negative or NaN probability");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) throw DomainError("jsd: input does not sum to 1");
  };
  check(p);
  check(q);
  double out = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double m = 0.5 * (p[k] + q[k]);
    if (p[k] > 0.0) out += 0.5 * p[k] * std::log(p[k] / m);
    if (q[k] > 0.0) out += 0.5 * q[k] * std::log(q[k] / m);
  }
  return std::max(out, 0.0);
}

IntruderResult svd_intruder_analysis(const Tensor<double>& w_init, const Tensor<double>& w_final, std::size_t top_k,
                                     double threshold) {
  if (w_init.shape() != w_final.shape()) throw DimensionError("intruder analysis needs equal shapes");
  const auto u_final = top_left_vectors(w_final, top_k);
  const auto u_init = top_left_vectors(w_init, top_k);
  IntruderResult r;
  r.similarity = abs_cos(u_final, u_init);
  for (std::size_t a = 0; a < r.similarity.dim(0); ++a) {
    double best = 0.0;
    for (std::size_t b = 0; b < r.similarity.dim(1); ++b) best = std::max(best, r.similarity.at(a, b));
    if (best < threshold) r.intruders.push_back(a);
  }
  r.count = r.intruders.size();
  return r;
}

Tensor<double> singular_vector_similarity(const std::vector<std::vector<Tensor<double>>>& members, std::size_t top_k) {
  require_members(members, "singular_vector_similarity");
  const std::size_t layers = members[0].size();
  if (layers == 0) throw DomainError("singular_vector_similarity needs at least one layer");
  std::vector<std::vector<Tensor<double>>> vecs(members.size());
  for (std::size_t i = 0; i < members.size(); ++i) {
    for (const auto& w : members[i]) vecs[i].push_back(top_left_vectors(w, top_k));
  }
  Tensor<double> acc;
  std::size_t terms = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t i = 0; i < members.size(); ++i) {
      for (std::size_t j = i + 1; j < members.size(); ++j) {
        auto s = abs_cos(vecs[i][l], vecs[j][l]);
        if (acc.empty()) acc = Tensor<double>::zeros(s.shape());
        for (std::size_t e = 0; e < s.numel(); ++e) acc[e] += s[e];
        ++terms;
      }
    }
  }
  for (auto& v : acc.data()) v /= static_cast<double>(terms);
  return acc;
}

double diversity_score(const std::vector<std::vector<Tensor<double>>>& members) {
  require_members(members, "diversity_score");
  double total = 0.0;
  std::size_t terms = 0, skipped = 0;
  for (std::size_t l = 0; l < members[0].size(); ++l) {
    for (std::size_t i = 0; i < members.size(); ++i) {
      for (std::size_t j = i + 1; j < members.size(); ++j) {
        const auto& a = members[i][l];
        const auto& b = members[j][l];
        if (a.numel() != b.numel()) throw DimensionError("diversity_score: member matrices differ in size");
        const auto n = static_cast<double>(a.numel());
        double ma = 0, mb = 0;
        for (std::size_t e = 0; e < a.numel(); ++e) {
          ma += a[e];
          mb += b[e];
        }
        ma /= n;
        mb /= n;
        double sab = 0, saa = 0, sbb = 0;
        for (std::size_t e = 0; e < a.numel(); ++e) {
          const double da = a[e] - ma, db = b[e] - mb;
          sab += da * db;
          saa += da * da;
          sbb += db * db;
        }
        if (saa == 0.0 || sbb == 0.0) {
          ++skipped;
          continue;
        }
        total += sab / std::sqrt(saa * sbb);
        ++terms;
      }
    }
  }
  if (skipped > 0) spdlog::warn("diversity_score: skipped {} zero-variance member pair(s)", skipped);
  if (terms == 0) return 0.0;
  return 1.0 - total / static_cast<double>(terms);
}

Tensor<double> export_function_space(const Tensor<double>& probs) {
  if (probs.rank() != 3) throw DimensionError("export_function_space expects [N,S,C]");
  return probs.reshaped(Shape{probs.dim(0), probs.dim(1) * probs.dim(2)});
}

template <typename T>
std::vector<Tensor<double>> value_initial(const EnsembleVit<T>& model) {
  std::vector<Tensor<double>> out;
  for (const auto& blk : model.backbone().blocks) {
    out.push_back(to_double(blk.attn[static_cast<std::size_t>(Role::value)].base.weight.value()));
  }
  return out;
}

template <typename T>
std::vector<std::vector<Tensor<double>>> value_updates(const EnsembleVit<T>& model) {
  const auto& cfg = model.config();
  const std::size_t v = static_cast<std::size_t>(Role::value);
  std::vector<std::vector<Tensor<double>>> out;
  const auto& base = model.backbone();
  switch (cfg.method) {
    case Method::lora:
      for (std::size_t i = 0; i < cfg.ensemble_size; ++i) {
        out.emplace_back();
        for (const auto& blk : base.blocks) {
          const auto& lora = *blk.attn[v].lora;
          out.back().push_back(to_double(kernels::matmul(lora.b[i].value(), lora.a[i].value())));
        }
      }
      break;
    case Method::batch:
    case Method::batch_pp:
      for (std::size_t i = 0; i < cfg.ensemble_size; ++i) {
        out.emplace_back();
        for (const auto& blk : base.blocks) {
          Tape<T> tape(false);
          auto w = batch_member_weight(tape, *blk.attn[v].batch, i).value();
          auto d = to_double(w);
          const auto w0 = to_double(blk.attn[v].base.weight.value());
          for (std::size_t e = 0; e < d.numel(); ++e) d[e] -= w0[e];
          out.back().push_back(std::move(d));
        }
      }
      break;
    case Method::explicit_ensemble:
    case Method::snapshot:
      for (std::size_t i = 0; i < cfg.ensemble_size; ++i) {
        out.emplace_back();
        const auto& mb = *model.member_states()[i].backbone;
        for (std::size_t l = 0; l < base.blocks.size(); ++l) {
          auto d = to_double(mb.blocks[l].attn[v].base.weight.value());
          const auto w0 = to_double(base.blocks[l].attn[v].base.weight.value());
          for (std::size_t e = 0; e < d.numel(); ++e) d[e] -= w0[e];
          out.back().push_back(std::move(d));
        }
      }
      break;
    default:
      break;
  }
  return out;
}

DiversitySummary summarize_diversity(const Tensor<double>& probs,
                                     const std::vector<std::vector<Tensor<double>>>& updates,
                                     const std::vector<Tensor<double>>& initial, std::size_t top_k) {
  if (probs.rank() != 3) throw DimensionError("summarize_diversity expects probabilities [N,S,C]");
  const std::size_t n = probs.dim(0), s = probs.dim(1), c = probs.dim(2);
  if (n < 2) throw DomainError("diversity analysis needs at least 2 members");
  DiversitySummary out;
  std::vector<std::vector<int>> preds(n);
  std::vector<std::vector<double>> mean_dist(n, std::vector<double>(c, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    preds[i].resize(s);
    for (std::size_t r = 0; r < s; ++r) {
      const double* row = probs.raw() + (i * s + r) * c;
      preds[i][r] = static_cast<int>(std::max_element(row, row + c) - row);
      for (std::size_t k = 0; k < c; ++k) mean_dist[i][k] += row[k];
    }
    double total = 0.0;
    for (auto& v : mean_dist[i]) total += (v /= static_cast<double>(s));
    for (auto& v : mean_dist[i]) v /= total;
  }
  out.disagreement = Tensor<double>(Shape{n, n});
  out.jsd = Tensor<double>(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      out.disagreement.at(i, j) = out.disagreement.at(j, i) = disagreement_rate(preds[i], preds[j]);
      out.jsd.at(i, j) = out.jsd.at(j, i) = jsd(mean_dist[i], mean_dist[j]);
    }
  }
  out.function_space = export_function_space(probs);

  if (!updates.empty()) {
    if (updates.size() != n) throw DimensionError("weight updates and probabilities disagree on member count");
    out.diversity_score = diversity_score(updates);
    out.singular_similarity = singular_vector_similarity(updates, top_k);
    out.weight_cosine = Tensor<double>(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i; j < n; ++j) {
        double dot = 0, ni = 0, nj = 0;
        for (std::size_t l = 0; l < updates[i].size(); ++l) {
          for (std::size_t e = 0; e < updates[i][l].numel(); ++e) {
            dot += updates[i][l][e] * updates[j][l][e];
            ni += updates[i][l][e] * updates[i][l][e];
            nj += updates[j][l][e] * updates[j][l][e];
          }
        }
        const double cosv = (ni > 0 && nj > 0) ? dot / std::sqrt(ni * nj) : 0.0;
        out.weight_cosine.at(i, j) = out.weight_cosine.at(j, i) = cosv;
      }
    }
    if (initial.size() == updates[0].size()) {
      for (std::size_t i = 0; i < n; ++i) {
        out.intruders.emplace_back();
        for (std::size_t l = 0; l < initial.size(); ++l) {
          auto w_final = initial[l];
          for (std::size_t e = 0; e < w_final.numel(); ++e) w_final[e] += updates[i][l][e];
          out.intruders.back().push_back(svd_intruder_analysis(initial[l], w_final, top_k).count);
        }
      }
    }
  }
  return out;
}

namespace {

nlohmann::json matrix_json(const Tensor<double>& m) {
  auto rows = nlohmann::json::array();
  if (m.empty()) return rows;
  for (std::size_t i = 0; i < m.dim(0); ++i) {
    rows.push_back(std::vector<double>(m.raw() + i * m.dim(1), m.raw() + (i + 1) * m.dim(1)));
  }
  return rows;
}

}  // namespace

nlohmann::json to_json(const DiversitySummary& s, bool include_function_space) {
  nlohmann::json j{
      {"disagreement", matrix_json(s.disagreement)},
      {"jsd", matrix_json(s.jsd)},
      {"intruder_counts", s.intruders},
      {"diversity_score", s.diversity_score},
      {"weight_cosine", matrix_json(s.weight_cosine)},
      {"singular_vector_similarity", matrix_json(s.singular_similarity)},
  };
  if (include_function_space) j["function_space"] = matrix_json(s.function_space);
  return j;
}

template std::vector<std::vector<Tensor<double>>> value_updates<float>(const EnsembleVit<float>&);
template std::vector<std::vector<Tensor<double>>> value_updates<double>(const EnsembleVit<double>&);
template std::vector<Tensor<double>> value_initial<float>(const EnsembleVit<float>&);
template std::vector<Tensor<double>> value_initial<double>(const EnsembleVit<double>&);

}  // namespace lens
