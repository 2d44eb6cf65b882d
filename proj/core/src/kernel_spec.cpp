#include "bespoke/kernel_spec.hpp"

#include <json.hpp>

namespace bespoke::kernelgen {

using nlohmann::json;

std::string join_op_name(JoinOp op) {
  switch (op) {
    case JoinOp::IndexNestedLoop:
      return "index_nested_loop";
    case JoinOp::HashJoin:
      return "hash_join";
    case JoinOp::SortMerge:
      return "sort_merge";
    case JoinOp::BitmapSemiJoin:
      return "bitmap_semi_join";
    case JoinOp::TagArrayJoin:
      return "tag_array_join";
  }
  return "?";
}

std::string access_path_name(AccessPath p) {
  switch (p) {
    case AccessPath::FullScan:
      return "full_scan";
    case AccessPath::SortedRangeScan:
      return "sorted_range_scan";
    case AccessPath::ZoneSkipScan:
      return "zone_skip_scan";
    case AccessPath::DictionaryRewrite:
      return "dictionary_rewrite";
    case AccessPath::CharMaskPrefilter:
      return "char_mask_prefilter";
  }
  return "?";
}

std::string agg_strategy_name(AggStrategy s) {
  switch (s) {
    case AggStrategy::Scalar:
      return "scalar";
    case AggStrategy::DenseKeyArray:
      return "dense_key_array";
    case AggStrategy::DirectArray:
      return "direct_array";
    case AggStrategy::HashGroup:
      return "hash_group";
    case AggStrategy::TwoPhase:
      return "two_phase";
  }
  return "?";
}

namespace {

JoinOp join_op_from(const std::string& s) {
  if (s == "index_nested_loop") return JoinOp::IndexNestedLoop;
  if (s == "hash_join") return JoinOp::HashJoin;
  if (s == "sort_merge") return JoinOp::SortMerge;
  if (s == "bitmap_semi_join") return JoinOp::BitmapSemiJoin;
  if (s == "tag_array_join") return JoinOp::TagArrayJoin;
  throw std::runtime_error("unknown join op: " + s);
}

AccessPath access_path_from(const std::string& s) {
  if (s == "full_scan") return AccessPath::FullScan;
  if (s == "sorted_range_scan") return AccessPath::SortedRangeScan;
  if (s == "zone_skip_scan") return AccessPath::ZoneSkipScan;
  if (s == "dictionary_rewrite") return AccessPath::DictionaryRewrite;
  if (s == "char_mask_prefilter") return AccessPath::CharMaskPrefilter;
  throw std::runtime_error("unknown access path: " + s);
}

AggStrategy agg_from(const std::string& s) {
  if (s == "scalar") return AggStrategy::Scalar;
  if (s == "dense_key_array") return AggStrategy::DenseKeyArray;
  if (s == "direct_array") return AggStrategy::DirectArray;
  if (s == "hash_group") return AggStrategy::HashGroup;
  if (s == "two_phase") return AggStrategy::TwoPhase;
  throw std::runtime_error("unknown aggregation strategy: " + s);
}

}  // namespace

std::string KernelSpec::to_json() const {
  json j;
  j["template"] = template_id;
  j["join_order"] = join_order;
  json ops = json::array();
  for (auto op : join_ops) ops.push_back(join_op_name(op));
  j["join_ops"] = ops;
  json paths = json::object();
  for (const auto& [idx, p] : filter_paths) paths[std::to_string(idx)] = access_path_name(p);
  j["filter_paths"] = paths;
  json semis = json::array();
  for (auto op : semi_ops) semis.push_back(join_op_name(op));
  j["semi_ops"] = semis;
  j["agg"] = agg_strategy_name(agg);
  j["fused"] = fused;
  j["use_derived"] = use_derived;
  j["branchless_predicates"] = branchless_predicates;
  j["presized_outputs"] = presized_outputs;
  j["unrolled_inner"] = unrolled_inner;
  return j.dump(2);
}

KernelSpec KernelSpec::from_json(const std::string& text) {
  json j = json::parse(text);
  KernelSpec s;
  s.template_id = j.at("template").get<std::string>();
  s.join_order = j.at("join_order").get<std::vector<int>>();
  for (const auto& op : j.at("join_ops")) s.join_ops.push_back(join_op_from(op.get<std::string>()));
  for (auto it = j.at("filter_paths").begin(); it != j.at("filter_paths").end(); ++it)
    s.filter_paths[std::stoi(it.key())] = access_path_from(it.value().get<std::string>());
  for (const auto& op : j.at("semi_ops")) s.semi_ops.push_back(join_op_from(op.get<std::string>()));
  s.agg = agg_from(j.at("agg").get<std::string>());
  s.fused = j.at("fused").get<bool>();
  s.use_derived = j.at("use_derived").get<bool>();
  s.branchless_predicates = j.at("branchless_predicates").get<bool>();
  s.presized_outputs = j.at("presized_outputs").get<bool>();
  s.unrolled_inner = j.at("unrolled_inner").get<bool>();
  return s;
}

bool RegionPredicate::contains(const contract::ParamBinding& binding) const {
  if (param.empty()) return true;
  auto it = binding.find(param);
  if (it == binding.end()) return false;
  int64_t v = it->second.i;
  if (lo && v < *lo) return false;
  if (hi && v > *hi) return false;
  return true;
}

std::string RegionPredicate::to_string() const {
  if (param.empty()) return "*";
  std::string s = param;
  if (lo) s = std::to_string(*lo) + " <= " + s;
  if (hi) s += " <= " + std::to_string(*hi);
  return s;
}

uint64_t TraceReport::total_iterations() const {
  uint64_t n = 0;
  for (const auto& op : ops) n += op.iterations;
  return n;
}

const TraceReport::OpCounters* TraceReport::find(const std::string& name) const {
  for (const auto& op : ops)
    if (op.name == name) return &op;
  return nullptr;
}

}  // namespace bespoke::kernelgen
