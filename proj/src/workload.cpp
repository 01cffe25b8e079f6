// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpa/workload.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "cpa/errors.hpp"
#include "cpa/synthetic_model.hpp"

namespace cpa {

using nlohmann::json;

WorkloadShape parse_workload_shape(std::string_view name) {
  if (name == "amc-like") return WorkloadShape::amc_like;
  if (name == "gsm8k-like") return WorkloadShape::gsm8k_like;
  if (name == "mixed") return WorkloadShape::mixed;
  if (name == "longbench-like") return WorkloadShape::longbench_like;
  throw std::invalid_argument("unknown workload shape '" + std::string(name) + "'");
}

std::string_view to_string(WorkloadShape shape) {
  switch (shape) {
    case WorkloadShape::amc_like: return "amc-like";
    case WorkloadShape::gsm8k_like: return "gsm8k-like";
    case WorkloadShape::mixed: return "mixed";
    case WorkloadShape::longbench_like: return "longbench-like";
  }
  return "?";
}

IntRange default_prompt_range(WorkloadShape shape) {
  switch (shape) {
    case WorkloadShape::amc_like: return {16, 64};
    case WorkloadShape::gsm8k_like: return {32, 128};
    case WorkloadShape::mixed: return {16, 1024};
    case WorkloadShape::longbench_like: return {512, 2048};
  }
  return {1, 1};
}

IntRange default_output_range(WorkloadShape shape) {
  switch (shape) {
    case WorkloadShape::amc_like: return {512, 2048};
    case WorkloadShape::gsm8k_like: return {64, 256};
    case WorkloadShape::mixed: return {16, 2048};
    case WorkloadShape::longbench_like: return {16, 64};
  }
  return {1, 1};
}

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::int64_t draw(std::uint64_t seed, std::uint64_t counter, IntRange r) {
  const auto span = static_cast<std::uint64_t>(r.hi - r.lo) + 1;
  return r.lo + static_cast<std::int64_t>(mix64(seed ^ mix64(counter)) % span);
}

[[noreturn]] void fail(const std::string& where, const std::string& what) { throw SchemaError(where, what); }

const json* find(const json& obj, const char* key) {
  const auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

std::int64_t as_int(const json& v, const std::string& where) {
  if (!v.is_number_integer()) fail(where, "expected an integer");
  return v.get<std::int64_t>();
}

std::uint64_t as_seed(const json& v, const std::string& where) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  const std::int64_t s = as_int(v, where);
  if (s < 0) fail(where, "seed must be non-negative");
  return static_cast<std::uint64_t>(s);
}

std::int64_t positive(const json& v, const std::string& where) {
  const std::int64_t x = as_int(v, where);
  if (x <= 0) fail(where, "must be positive, got " + std::to_string(x));
  return x;
}

std::int64_t non_negative(const json& v, const std::string& where) {
  const std::int64_t x = as_int(v, where);
  if (x < 0) fail(where, "must be non-negative, got " + std::to_string(x));
  return x;
}

IntRange as_range(const json& v, const std::string& where) {
  if (v.is_number_integer()) {
    const std::int64_t x = positive(v, where);
    return {x, x};
  }
  if (!v.is_object()) fail(where, "expected an integer or {\"uniform\": [lo, hi]}");
  const json* u = find(v, "uniform");
  if (u == nullptr || !u->is_array() || u->size() != 2) fail(where + ".uniform", "expected [lo, hi]");
  const IntRange r{positive((*u)[0], where + ".uniform[0]"), positive((*u)[1], where + ".uniform[1]")};
  if (r.lo > r.hi) fail(where + ".uniform", "lo exceeds hi");
  return r;
}

std::string group_name(const json& v, const std::string& where) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  fail(where, "expected a string or integer group");
}

void reject_unknown(const json& obj, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [key, _] : obj.items()) {
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end()) {
      fail(where.empty() ? key : where + "." + key, "unknown field");
    }
  }
}

RequestSpec parse_request(const json& r, std::size_t index, std::uint64_t workload_seed) {
  const std::string where = "requests[" + std::to_string(index) + "]";
  if (!r.is_object()) fail(where, "expected an object");
  reject_unknown(r, {"arrival_step", "prompt_len", "prompt_tokens", "prefix", "output_len", "seed"}, where);
  RequestSpec spec;
  if (const json* a = find(r, "arrival_step")) spec.arrival_step = non_negative(*a, where + ".arrival_step");
  const json* out = find(r, "output_len");
  if (out == nullptr) fail(where + ".output_len", "missing");
  spec.output_len = positive(*out, where + ".output_len");
  spec.seed = mix64(workload_seed ^ mix64(index + 1));
  if (const json* s = find(r, "seed")) spec.seed = as_seed(*s, where + ".seed");

  const json* len = find(r, "prompt_len");
  const json* tokens = find(r, "prompt_tokens");
  if ((len == nullptr) == (tokens == nullptr)) fail(where, "exactly one of prompt_len and prompt_tokens is required");
  if (tokens != nullptr) {
    if (find(r, "prefix") != nullptr) fail(where + ".prefix", "not allowed with prompt_tokens");
    if (!tokens->is_array() || tokens->empty()) fail(where + ".prompt_tokens", "expected a non-empty array");
    for (std::size_t i = 0; i < tokens->size(); ++i) {
      spec.prompt.push_back(as_seed((*tokens)[i], where + ".prompt_tokens[" + std::to_string(i) + "]"));
    }
    return spec;
  }
  const auto length = static_cast<std::size_t>(positive(*len, where + ".prompt_len"));
  if (const json* p = find(r, "prefix")) {
    if (!p->is_object()) fail(where + ".prefix", "expected {\"group\": ..., \"len\": n}");
    reject_unknown(*p, {"group", "len"}, where + ".prefix");
    const json* g = find(*p, "group");
    const json* l = find(*p, "len");
    if (g == nullptr) fail(where + ".prefix.group", "missing");
    if (l == nullptr) fail(where + ".prefix.len", "missing");
    spec.prefix_group = group_name(*g, where + ".prefix.group");
    spec.prefix_len = static_cast<std::size_t>(positive(*l, where + ".prefix.len"));
    if (spec.prefix_len > length) fail(where + ".prefix.len", "exceeds prompt_len");
  }
  spec.prompt = make_prompt(spec.seed, length, spec.prefix_group, spec.prefix_len);
  return spec;
}

GeneratorSpec parse_generator(const json& g, std::size_t index) {
  const std::string where = "generators[" + std::to_string(index) + "]";
  if (!g.is_object()) fail(where, "expected an object");
  reject_unknown(g, {"shape", "count", "prompt", "output", "seed", "arrival", "shared_prefix"}, where);
  GeneratorSpec spec;
  const json* shape = find(g, "shape");
  if (shape == nullptr || !shape->is_string()) fail(where + ".shape", "expected a shape name");
  try {
    spec.shape = parse_workload_shape(shape->get<std::string>());
  } catch (const std::invalid_argument& e) {
    fail(where + ".shape", e.what());
  }
  const json* count = find(g, "count");
  if (count == nullptr) fail(where + ".count", "missing");
  spec.count = non_negative(*count, where + ".count");
  if (const json* p = find(g, "prompt")) spec.prompt = as_range(*p, where + ".prompt");
  if (const json* o = find(g, "output")) spec.output = as_range(*o, where + ".output");
  if (const json* s = find(g, "seed")) spec.seed = as_seed(*s, where + ".seed");
  if (const json* a = find(g, "arrival")) {
    if (!a->is_object()) fail(where + ".arrival", "expected {\"start\": n, \"every\": n}");
    reject_unknown(*a, {"start", "every"}, where + ".arrival");
    if (const json* s = find(*a, "start")) spec.arrival_start = non_negative(*s, where + ".arrival.start");
    if (const json* e = find(*a, "every")) spec.arrival_every = non_negative(*e, where + ".arrival.every");
  }
  if (const json* sp = find(g, "shared_prefix")) {
    if (!sp->is_object()) fail(where + ".shared_prefix", "expected {\"groups\": n, \"len\": n}");
    reject_unknown(*sp, {"groups", "len"}, where + ".shared_prefix");
    const json* n = find(*sp, "groups");
    const json* l = find(*sp, "len");
    if (n == nullptr) fail(where + ".shared_prefix.groups", "missing");
    if (l == nullptr) fail(where + ".shared_prefix.len", "missing");
    spec.prefix_groups = positive(*n, where + ".shared_prefix.groups");
    spec.prefix_len = positive(*l, where + ".shared_prefix.len");
  }
  return spec;
}

std::size_t line_of(std::string_view text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

}  // namespace

std::vector<std::uint64_t> make_prompt(std::uint64_t request_seed, std::size_t length,
                                       const std::optional<std::string>& prefix_group, std::size_t prefix_len) {
  std::vector<std::uint64_t> tokens(length);
  const std::size_t shared = prefix_group ? std::min(prefix_len, length) : 0;
  const std::uint64_t group_key = prefix_group ? mix64(fnv1a(*prefix_group)) : 0;
  for (std::size_t p = 0; p < length; ++p) {
    tokens[p] = p < shared ? mix64(group_key + p) : mix64(mix64(request_seed ^ 0x5851f42d4c957f2dULL) + p);
  }
  return tokens;
}

std::vector<RequestSpec> expand_generator(const GeneratorSpec& spec, std::size_t generator_index) {
  std::vector<RequestSpec> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  const std::uint64_t base = mix64(spec.seed ^ mix64(0x9e3779b9ULL + generator_index));
  const WorkloadShape shapes[] = {WorkloadShape::amc_like, WorkloadShape::gsm8k_like, WorkloadShape::longbench_like};
  for (std::int64_t i = 0; i < spec.count; ++i) {
    const auto c = static_cast<std::uint64_t>(i) * 8;
    WorkloadShape shape = spec.shape;
    if (shape == WorkloadShape::mixed) shape = shapes[draw(base, c, {0, 2})];
    const IntRange pr = spec.prompt.value_or(default_prompt_range(shape));
    const IntRange orr = spec.output.value_or(default_output_range(shape));
    RequestSpec r;
    r.arrival_step = spec.arrival_start + spec.arrival_every * i;
    r.output_len = draw(base, c + 1, orr);
    r.seed = mix64(base ^ mix64(c + 2));
    auto length = static_cast<std::size_t>(draw(base, c + 3, pr));
    if (spec.prefix_groups > 0) {
      const std::int64_t g = draw(base, c + 4, {0, spec.prefix_groups - 1});
      r.prefix_group = "g" + std::to_string(generator_index) + "." + std::to_string(g);
      r.prefix_len = static_cast<std::size_t>(spec.prefix_len);
      length += r.prefix_len;  // the shared prefix precedes the drawn prompt body
    }
    r.prompt = make_prompt(r.seed, length, r.prefix_group, r.prefix_len);
    out.push_back(std::move(r));
  }
  return out;
}

Workload parse_workload_string(std::string_view text, std::uint64_t default_seed) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    fail("line " + std::to_string(line_of(text, e.byte)), "malformed JSON");
  }
  if (!doc.is_object()) fail("<root>", "expected an object");
  reject_unknown(doc, {"seed", "requests", "generators"}, "");
  Workload w;
  w.seed = default_seed;
  if (const json* s = find(doc, "seed")) w.seed = as_seed(*s, "seed");

  if (const json* reqs = find(doc, "requests")) {
    if (!reqs->is_array()) fail("requests", "expected an array");
    for (std::size_t i = 0; i < reqs->size(); ++i) {
      RequestSpec r = parse_request((*reqs)[i], i, w.seed);
      if (!w.requests.empty() && r.arrival_step < w.requests.back().arrival_step) {
        fail("requests[" + std::to_string(i) + "].arrival_step", "arrival steps must be nondecreasing");
      }
      w.requests.push_back(std::move(r));
    }
  }
  if (const json* gens = find(doc, "generators")) {
    if (!gens->is_array()) fail("generators", "expected an array");
    for (std::size_t i = 0; i < gens->size(); ++i) {
      GeneratorSpec g = parse_generator((*gens)[i], i);
      if (find((*gens)[i], "seed") == nullptr) g.seed = w.seed;
      auto expanded = expand_generator(g, i);
      w.requests.insert(w.requests.end(), std::make_move_iterator(expanded.begin()),
                        std::make_move_iterator(expanded.end()));
    }
    std::stable_sort(w.requests.begin(), w.requests.end(),
                     [](const RequestSpec& a, const RequestSpec& b) { return a.arrival_step < b.arrival_step; });
  }
  return w;
}

Workload parse_workload(const std::string& path, std::uint64_t default_seed) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open workload file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_workload_string(buf.str(), default_seed);
}

std::string workload_to_json(const Workload& workload) {
  json doc;
  doc["seed"] = workload.seed;
  json reqs = json::array();
  for (const RequestSpec& r : workload.requests) {
    json j;
    j["arrival_step"] = r.arrival_step;
    j["output_len"] = r.output_len;
    j["seed"] = r.seed;
    const auto rebuilt = make_prompt(r.seed, r.prompt.size(), r.prefix_group, r.prefix_len);
    if (rebuilt == r.prompt) {
      j["prompt_len"] = r.prompt.size();
      if (r.prefix_group) j["prefix"] = {{"group", *r.prefix_group}, {"len", r.prefix_len}};
    } else {
      j["prompt_tokens"] = r.prompt;
    }
    reqs.push_back(std::move(j));
  }
  doc["requests"] = std::move(reqs);
  return doc.dump(2) + "\n";
}

}  // namespace cpa
