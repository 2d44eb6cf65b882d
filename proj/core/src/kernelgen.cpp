#include "bespoke/kernelgen.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "bespoke/errors.hpp"
#include "bespoke/kernel_emit.hpp"

namespace bespoke::kernelgen {

namespace {

struct OrderScore {
  std::vector<int> order;
  double sum = 0;    // sum of intermediate cardinalities
  double worst = 0;  // largest intermediate
};

void enumerate_rec(const sql::QueryAst& ast, const oracle::CardinalityProfile& profile,
                   std::vector<int>& order, std::vector<bool>& used, std::vector<bool>& edge_used,
                   double current, double sum, double worst, std::vector<OrderScore>& out) {
  size_t n = ast.from.size();
  if (order.size() == n) {
    out.push_back({order, sum, worst});
    return;
  }
  // Prefer connected extensions; cross products only when nothing connects
  // (mirrors the executor).
  std::vector<int> candidates;
  if (!order.empty()) {
    for (size_t t = 0; t < n; ++t) {
      if (used[t]) continue;
      for (const auto& j : ast.joins) {
        if ((j.left_table == int(t) && used[size_t(j.right_table)]) ||
            (j.right_table == int(t) && used[size_t(j.left_table)])) {
          candidates.push_back(int(t));
          break;
        }
      }
    }
  }
  if (candidates.empty())
    for (size_t t = 0; t < n; ++t)
      if (!used[t]) candidates.push_back(int(t));

  for (int t : candidates) {
    double filtered = double(profile.filtered_rows[size_t(t)]);
    double sel = 1.0;
    std::vector<size_t> taken;
    for (size_t e = 0; e < ast.joins.size(); ++e) {
      if (edge_used[e]) continue;
      const auto& j = ast.joins[e];
      if ((j.left_table == t && used[size_t(j.right_table)]) ||
          (j.right_table == t && used[size_t(j.left_table)])) {
        sel *= profile.edge_selectivity[e];
        edge_used[e] = true;
        taken.push_back(e);
      }
    }
    double next = order.empty() ? filtered : current * filtered * sel;
    order.push_back(t);
    used[size_t(t)] = true;
    enumerate_rec(ast, profile, order, used, edge_used, next, sum + next, std::max(worst, next), out);
    used[size_t(t)] = false;
    order.pop_back();
    for (size_t e : taken) edge_used[e] = false;
  }
}

}  // namespace

std::vector<std::vector<int>> enumerate_join_orders(const sql::QueryAst& ast,
                                                    const oracle::CardinalityProfile& profile, size_t beam,
                                                    double prune_ratio) {
  size_t n = ast.from.size();
  if (n == 0) return {};
  if (n == 1) return {{0}};

  std::vector<OrderScore> scored;
  std::vector<int> order;
  std::vector<bool> used(n, false), edge_used(ast.joins.size(), false);
  enumerate_rec(ast, profile, order, used, edge_used, 0, 0, 0, scored);

  double best_worst = std::numeric_limits<double>::max();
  for (const auto& s : scored) best_worst = std::min(best_worst, s.worst);
  std::vector<OrderScore> kept;
  for (auto& s : scored)
    if (prune_ratio <= 0 || s.worst <= best_worst * prune_ratio) kept.push_back(std::move(s));

  std::stable_sort(kept.begin(), kept.end(), [](const OrderScore& a, const OrderScore& b) {
    if (a.sum != b.sum) return a.sum < b.sum;
    return a.order < b.order;
  });
  if (kept.size() > beam) kept.resize(beam);

  std::vector<std::vector<int>> out;
  for (auto& s : kept) out.push_back(std::move(s.order));
  return out;
}

KernelSpec basic_spec(const sql::QueryAst& ast, const std::string& template_id) {
  KernelSpec s;
  s.template_id = template_id;
  for (size_t i = 0; i < ast.from.size(); ++i) s.join_order.push_back(int(i));
  for (size_t i = 1; i < ast.from.size(); ++i) s.join_ops.push_back(JoinOp::HashJoin);
  for (size_t i = 0; i < ast.semis.size(); ++i) s.semi_ops.push_back(JoinOp::HashJoin);
  s.agg = ast.group_by.empty() ? AggStrategy::Scalar : AggStrategy::HashGroup;
  return s;
}

KernelSpec select_strategies(const sql::QueryAst& ast, const planner::StoragePlan& plan,
                             const DatasetHeader& stats, const contract::Contract& contract,
                             const std::vector<int>& order, const std::string& template_id) {
  KernelSpec s;
  s.template_id = template_id;
  s.join_order = order;
  s.use_derived = !plan.derived.empty();

  auto table_name = [&](int pos) -> const std::string& { return ast.from[size_t(pos)].table; };
  auto column_name_of = [&](const std::string& table, int col_idx) -> std::string {
    const planner::TablePlan* tp = plan.find_table(table);
    if (!tp || size_t(col_idx) >= tp->encodings.size()) return "";
    return tp->encodings[size_t(col_idx)].column;
  };

  int driver = order.empty() ? 0 : order[0];
  const planner::TablePlan* driver_plan = plan.find_table(table_name(driver));
  std::string driver_sort =
      driver_plan && !driver_plan->sort_order.empty() ? driver_plan->sort_order.front() : "";

  // Join operators per step.
  std::vector<bool> edge_used(ast.joins.size(), false);
  for (size_t step = 1; step < order.size(); ++step) {
    int pos = order[step];
    const std::string& tname = table_name(pos);
    const planner::TablePlan* tplan = plan.find_table(tname);

    struct Pair {
      int outer_pos;
      int outer_col;
      int inner_col;
    };
    std::vector<Pair> pairs;
    auto in_prefix = [&](int p) {
      for (size_t k = 0; k < step; ++k)
        if (order[k] == p) return true;
      return false;
    };
    for (size_t e = 0; e < ast.joins.size(); ++e) {
      if (edge_used[e]) continue;
      const auto& j = ast.joins[e];
      if (j.left_table == pos && in_prefix(j.right_table)) {
        pairs.push_back({j.right_table, j.right_col, j.left_col});
        edge_used[e] = true;
      } else if (j.right_table == pos && in_prefix(j.left_table)) {
        pairs.push_back({j.left_table, j.left_col, j.right_col});
        edge_used[e] = true;
      }
    }

    JoinOp chosen = JoinOp::HashJoin;
    for (const auto& p : pairs) {
      std::string inner_col = column_name_of(tname, p.inner_col);
      std::string outer_table = table_name(p.outer_pos);
      std::string outer_col = column_name_of(outer_table, p.outer_col);
      const auto* dir = plan.find_directory(outer_table, tname);
      if (dir && dir->column == inner_col) {
        chosen = JoinOp::IndexNestedLoop;
        break;
      }
      if (plan.has_support(planner::SupportStructure::Kind::HashIndex, tname, inner_col)) {
        chosen = JoinOp::IndexNestedLoop;
        break;
      }
      if (p.outer_pos == driver && outer_col == driver_sort && tplan && tplan->sorted_by(inner_col)) {
        chosen = JoinOp::SortMerge;
        break;
      }
      if (tplan && tplan->sorted_by(inner_col)) {
        chosen = JoinOp::IndexNestedLoop;
        break;
      }
    }
    s.join_ops.push_back(chosen);
  }

  // Semi-join operators from the inner key range.
  for (const auto& semi : ast.semis) {
    JoinOp op = JoinOp::TagArrayJoin;
    auto it = stats.tables.find(semi.inner_table);
    if (it != stats.tables.end()) {
      std::string key_col = column_name_of(semi.inner_table, semi.inner_key_col);
      const ColumnStats* cs = it->second.find(key_col);
      if (cs && cs->has_minmax && uint64_t(cs->max.i - cs->min.i) < (1ull << 20)) op = JoinOp::BitmapSemiJoin;
    }
    s.semi_ops.push_back(op);
  }

  // Access paths per filter. Zone-skip pruning drives the scan from a single
  // column; the first eligible range filter claims it, and a sorted range
  // scan supersedes zone pruning entirely (the scan is already bounded).
  std::string zone_claimed;
  bool sorted_assigned = false;
  for (size_t fi = 0; fi < ast.filters.size(); ++fi) {
    const sql::FilterPred& f = ast.filters[fi];
    if (f.table_idx != driver || !f.lhs || f.lhs->kind != sql::Expr::Kind::ColumnRef) continue;
    const planner::TablePlan* tp = plan.find_table(table_name(f.table_idx));
    bool is_range = f.kind == sql::FilterPred::Kind::Between ||
                    (f.kind == sql::FilterPred::Kind::Compare && f.op != sql::CmpOp::Eq);
    if (is_range && tp && tp->sorted_by(f.lhs->column) &&
        tp->encoding_of(f.lhs->column) != planner::Encoding::Dictionary &&
        tp->encoding_of(f.lhs->column) != planner::Encoding::StringArena)
      sorted_assigned = true;
  }
  for (size_t fi = 0; fi < ast.filters.size(); ++fi) {
    const sql::FilterPred& f = ast.filters[fi];
    if (f.table_idx < 0 || f.lhs->kind != sql::Expr::Kind::ColumnRef) continue;
    const std::string& tname = table_name(f.table_idx);
    const planner::TablePlan* tp = plan.find_table(tname);
    if (!tp) continue;
    const std::string& cname = f.lhs->column;
    bool is_range = f.kind == sql::FilterPred::Kind::Between ||
                    (f.kind == sql::FilterPred::Kind::Compare && f.op != sql::CmpOp::Eq);
    bool is_eq = f.kind == sql::FilterPred::Kind::InList ||
                 (f.kind == sql::FilterPred::Kind::Compare && f.op == sql::CmpOp::Eq);
    auto bound_ok = [](const sql::ExprPtr& e) {
      return !e || e->kind == sql::Expr::Kind::Literal || e->kind == sql::Expr::Kind::Param;
    };
    bool bounded = bound_ok(f.lo) && bound_ok(f.hi);

    if (is_range && bounded && f.table_idx == driver && tp->sorted_by(cname) &&
        tp->encoding_of(cname) != planner::Encoding::Dictionary &&
        tp->encoding_of(cname) != planner::Encoding::StringArena) {
      s.filter_paths[int(fi)] = AccessPath::SortedRangeScan;
      continue;
    }
    if (is_range && bounded && f.table_idx == driver && !sorted_assigned &&
        (zone_claimed.empty() || zone_claimed == cname) &&
        plan.has_support(planner::SupportStructure::Kind::ZoneMap, tname, cname)) {
      zone_claimed = cname;
      s.filter_paths[int(fi)] = AccessPath::ZoneSkipScan;
      continue;
    }
    if (is_eq && tp->encoding_of(cname) == planner::Encoding::Dictionary) {
      s.filter_paths[int(fi)] = AccessPath::DictionaryRewrite;
      continue;
    }
    if (f.kind == sql::FilterPred::Kind::Like) {
      if (plan.has_support(planner::SupportStructure::Kind::CharMaskAlpha, tname, cname) ||
          plan.has_support(planner::SupportStructure::Kind::CharMaskBigram, tname, cname)) {
        s.filter_paths[int(fi)] = AccessPath::CharMaskPrefilter;
      } else if (tp->encoding_of(cname) == planner::Encoding::Dictionary) {
        s.filter_paths[int(fi)] = AccessPath::DictionaryRewrite;
      }
    }
  }

  // Aggregation strategy. Dense-key first, then primary-key direct, then the
  // generic hash fallback; fused whenever the aggregation consumes the join
  // output directly (always true for this pipeline shape).
  bool has_agg = ast.has_aggregates();
  if (!has_agg && ast.group_by.empty()) return s;

  if (ast.group_by.empty()) {
    s.agg = AggStrategy::Scalar;
  } else {
    bool dense_ok = true;
    double capacity = 1;
    for (const auto& g : ast.group_by) {
      const std::string& tname = table_name(g->table_idx);
      const planner::TablePlan* tp = plan.find_table(tname);
      auto it = stats.tables.find(tname);
      const ColumnStats* cs = it == stats.tables.end() ? nullptr : it->second.find(g->column);
      if (tp && tp->encoding_of(g->column) == planner::Encoding::Dictionary && cs && cs->null_count == 0) {
        capacity *= double(std::max<size_t>(cs->distinct_count, 1));
      } else if (cs && cs->has_minmax && cs->null_count == 0 && g->type.kind != TypeKind::Varchar) {
        capacity *= double(cs->max.i - cs->min.i) + 1;
      } else {
        dense_ok = false;
        break;
      }
      if (capacity > double(1ull << 20)) {
        dense_ok = false;
        break;
      }
    }
    if (dense_ok) {
      s.agg = AggStrategy::DenseKeyArray;
    } else if (ast.group_by.size() == 1) {
      const auto& g = ast.group_by[0];
      const contract::TableSchema* ts = contract.find_table(table_name(g->table_idx));
      bool is_pk = ts && !ts->primary_key.empty() && ts->column_index(ts->primary_key) == g->col_idx;
      s.agg = is_pk ? AggStrategy::DirectArray : AggStrategy::HashGroup;
    } else {
      s.agg = AggStrategy::HashGroup;
    }
  }
  s.fused = true;
  return s;
}

KernelArtifact emit_kernel(const KernelSpec& spec, KernelArtifact::Backend backend, bool tracing,
                           const sql::QueryAst& ast, const planner::BespokeStore& store,
                           const contract::Contract& contract) {
  KernelArtifact a;
  a.backend = backend;
  a.spec = spec;
  a.tracing = tracing;
  if (backend == KernelArtifact::Backend::Interpreted) {
    a.interp = InterpretedKernel::build(spec, ast, store, contract, tracing);
    return a;
  }
  EmittedKernel e = emit_kernel_source(spec, ast, store, contract, tracing);
  a.source = std::move(e.source);
  a.entry_symbol = std::move(e.entry_symbol);
  a.manifest_json = std::move(e.manifest_json);
  return a;
}

const std::vector<int>* SplitMeasurement::best_order() const {
  const std::vector<int>* best = nullptr;
  double bt = std::numeric_limits<double>::max();
  for (const auto& [order, t] : order_times) {
    if (t < bt) {
      bt = t;
      best = &order;
    }
  }
  return best;
}

std::vector<std::pair<RegionPredicate, KernelSpec>> split_parameter_space(
    const contract::QueryTemplate& tmpl, const sql::QueryAst& ast, const planner::StoragePlan& plan,
    const DatasetHeader& stats, const contract::Contract& contract,
    const std::vector<SplitMeasurement>& measurements) {
  std::vector<std::pair<RegionPredicate, KernelSpec>> out;
  if (measurements.empty()) throw Error("split requires measurements");

  std::vector<const std::vector<int>*> labels;
  std::map<std::vector<int>, bool> distinct;
  for (const auto& m : measurements) {
    const auto* best = m.best_order();
    if (!best) throw Error("split measurement without order times");
    labels.push_back(best);
    distinct[*best] = true;
  }

  auto spec_for = [&](const std::vector<int>& order) {
    return select_strategies(ast, plan, stats, contract, order, tmpl.id);
  };

  if (distinct.size() == 1) {
    out.push_back({RegionPredicate{}, spec_for(*labels[0])});
    return out;
  }

  // Robust fallback: best worst-case runtime across all bindings.
  auto robust = [&]() {
    std::map<std::vector<int>, double> worst;
    for (const auto& m : measurements)
      for (const auto& [o, t] : m.order_times)
        worst[o] = std::max(worst.count(o) ? worst[o] : 0.0, t);
    const std::vector<int>* best = nullptr;
    double bw = std::numeric_limits<double>::max();
    for (const auto& [o, w] : worst)
      if (w < bw) {
        bw = w;
        best = &o;
      }
    return spec_for(*best);
  };

  // A valid split: sorting the bindings by one numeric parameter yields one
  // contiguous run per winning order.
  struct Split {
    std::string param;
    std::vector<int64_t> thresholds;
    std::vector<std::vector<int>> winners;
  };
  std::optional<Split> found;

  for (const auto& dom : tmpl.params) {
    if (dom.kind == contract::ParamDomain::Kind::Choice && !dom.choices.empty() &&
        dom.choices[0].tag == Value::Tag::Str)
      continue;  // string choices have no threshold order
    std::vector<size_t> idx(measurements.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    auto value_of = [&](size_t i) { return measurements[i].binding.at(dom.name).i; };
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return value_of(a) < value_of(b); });

    struct Run {
      const std::vector<int>* label;
      int64_t lo, hi;
    };
    std::vector<Run> runs;
    for (size_t k = 0; k < idx.size(); ++k) {
      const auto* lab = labels[idx[k]];
      int64_t v = value_of(idx[k]);
      if (runs.empty() || !(*runs.back().label == *lab))
        runs.push_back({lab, v, v});
      else
        runs.back().hi = v;
    }
    std::set<std::vector<int>> seen;
    bool ok = runs.size() == distinct.size();
    for (const auto& r : runs)
      if (ok && !seen.insert(*r.label).second) ok = false;
    for (size_t k = 1; k < runs.size() && ok; ++k)
      if (runs[k - 1].hi >= runs[k].lo) ok = false;  // overlapping values cannot separate
    if (!ok) continue;

    Split sp;
    sp.param = dom.name;
    for (size_t k = 0; k < runs.size(); ++k) {
      sp.winners.push_back(*runs[k].label);
      if (k + 1 < runs.size())
        sp.thresholds.push_back(int64_t(std::floor((double(runs[k].hi) + double(runs[k + 1].lo)) / 2.0)));
    }
    found = std::move(sp);
    break;  // parameters are examined in declaration order
  }

  if (!found) {
    out.push_back({RegionPredicate{}, robust()});
    return out;
  }

  for (size_t k = 0; k < found->winners.size(); ++k) {
    RegionPredicate r;
    r.param = found->param;
    if (k > 0) r.lo = found->thresholds[k - 1] + 1;
    if (k + 1 < found->winners.size()) r.hi = found->thresholds[k];
    out.push_back({std::move(r), spec_for(found->winners[k])});
  }
  return out;
}

}  // namespace bespoke::kernelgen
