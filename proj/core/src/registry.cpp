#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "seqa/error.hpp"
#include "seqa/metrics.hpp"

namespace seqa::metrics {

namespace {

using nlohmann::json;

MetricSpec ext_bounded(const std::string& name, double lo, double hi, ReferenceType ref,
                       double center, double scale) {
  MetricSpec s;
  s.name = name;
  s.range_lo = lo;
  s.range_hi = hi;
  s.direction = Direction::kHigherBetter;
  s.alpha = -1;
  s.activation = Activation::kScaledSigmoid;
  s.act_lo = lo;
  s.act_hi = hi;
  s.oracle = OracleKind::kExternalOutOfScope;
  s.reference_type = ref;
  s.score_center = center;
  s.score_scale = scale;
  return s;
}

std::string dir_name(Direction d) {
  return d == Direction::kHigherBetter ? "higher_better" : "lower_better";
}
Direction dir_from(const std::string& s) {
  if (s == "higher_better") return Direction::kHigherBetter;
  if (s == "lower_better") return Direction::kLowerBetter;
  fail("registry: unknown direction '" + s + "'");
}
std::string act_name(Activation a) {
  switch (a) {
    case Activation::kIdentity: return "identity";
    case Activation::kRelu: return "relu";
    case Activation::kScaledSigmoid: return "scaled_sigmoid";
    case Activation::kTanhUnit: return "tanh_unit";
  }
  return "identity";
}
Activation act_from(const std::string& s) {
  if (s == "identity") return Activation::kIdentity;
  if (s == "relu") return Activation::kRelu;
  if (s == "scaled_sigmoid") return Activation::kScaledSigmoid;
  if (s == "tanh_unit") return Activation::kTanhUnit;
  fail("registry: unknown activation '" + s + "'");
}
std::string ref_name(ReferenceType r) {
  switch (r) {
    case ReferenceType::kSignal: return "signal";
    case ReferenceType::kText: return "text";
    case ReferenceType::kNoReference: return "no_reference";
    case ReferenceType::kTextAndSignal: return "text_and_signal";
  }
  return "signal";
}
ReferenceType ref_from(const std::string& s) {
  if (s == "signal") return ReferenceType::kSignal;
  if (s == "text") return ReferenceType::kText;
  if (s == "no_reference") return ReferenceType::kNoReference;
  if (s == "text_and_signal") return ReferenceType::kTextAndSignal;
  fail("registry: unknown reference type '" + s + "'");
}

double activation_min(const MetricSpec& s) {
  switch (s.activation) {
    case Activation::kIdentity: return -kInf;
    case Activation::kRelu: return 0.0;
    case Activation::kScaledSigmoid: return s.act_lo;
    case Activation::kTanhUnit: return -1.0;
  }
  return -kInf;
}
double activation_max(const MetricSpec& s) {
  switch (s.activation) {
    case Activation::kIdentity: return kInf;
    case Activation::kRelu: return kInf;
    case Activation::kScaledSigmoid: return s.act_hi;
    case Activation::kTanhUnit: return 1.0;
  }
  return kInf;
}

}  // namespace

void validate(const MetricSpec& s) {
  require(!s.name.empty(), "MetricSpec: empty name");
  require(s.range_lo < s.range_hi, "MetricSpec: empty range for " + s.name);
  const int want_alpha = s.direction == Direction::kHigherBetter ? -1 : +1;
  require(s.alpha == want_alpha, "MetricSpec: alpha does not match direction for " + s.name);
  require(s.weight >= 0.0, "MetricSpec: negative weight for " + s.name);
  require(s.score_scale > 0.0, "MetricSpec: score_scale must be positive for " + s.name);
  if (s.activation == Activation::kScaledSigmoid)
    require(s.act_lo < s.act_hi, "MetricSpec: scaled_sigmoid bounds invalid for " + s.name);
  // Activation codomain must fit inside the declared range.
  require(activation_min(s) >= s.range_lo - 1e-12 && activation_max(s) <= s.range_hi + 1e-12,
          "MetricSpec: activation codomain escapes range for " + s.name);
}

MetricRegistry::MetricRegistry(std::vector<MetricSpec> specs) : specs_(std::move(specs)) {
  require(!specs_.empty(), "registry: empty");
  for (const auto& s : specs_) validate(s);
  for (std::size_t i = 0; i < specs_.size(); ++i)
    for (std::size_t j = i + 1; j < specs_.size(); ++j)
      require(specs_[i].name != specs_[j].name, "registry: duplicate name " + specs_[i].name);
}

MetricRegistry MetricRegistry::from_specs(std::vector<MetricSpec> specs) {
  return MetricRegistry(std::move(specs));
}

MetricRegistry MetricRegistry::default_table() {
  std::vector<MetricSpec> v;

  v.push_back(ext_bounded("PESQ", 1.0, 4.5, ReferenceType::kSignal, 2.75, 0.875));
  v.push_back(ext_bounded("DNSMOS", 1.0, 5.0, ReferenceType::kNoReference, 3.0, 1.0));
  for (const char* n :
       {"SIGMOS_OVRL", "SIGMOS_NOISE", "SIGMOS_REVERB", "SIGMOS_COL", "SIGMOS_LOUD", "SIGMOS_SIG"})
    v.push_back(ext_bounded(n, 1.0, 5.0, ReferenceType::kNoReference, 3.0, 1.0));

  {
    MetricSpec s;
    s.name = "LSD";
    s.range_lo = 0.0;
    s.direction = Direction::kLowerBetter;
    s.alpha = +1;
    s.activation = Activation::kRelu;
    s.oracle = OracleKind::kDeterministic;
    s.reference_type = ReferenceType::kSignal;
    s.score_center = 1.0;
    s.score_scale = 1.0;
    v.push_back(s);
  }
  {
    MetricSpec s;
    s.name = "SDR";
    s.direction = Direction::kHigherBetter;
    s.alpha = -1;
    s.activation = Activation::kIdentity;
    s.oracle = OracleKind::kDeterministic;
    s.reference_type = ReferenceType::kSignal;
    s.score_center = 10.0;
    s.score_scale = 10.0;
    v.push_back(s);
  }

  v.push_back(ext_bounded("MOS", 1.0, 5.0, ReferenceType::kNoReference, 3.0, 1.0));
  v.push_back(ext_bounded("UTMOS", 1.0, 5.0, ReferenceType::kNoReference, 3.0, 1.0));
  v.push_back(ext_bounded("Distill_MOS", 1.0, 5.0, ReferenceType::kNoReference, 3.0, 1.0));
  v.push_back(ext_bounded("NISQA_MOS", 1.0, 5.0, ReferenceType::kNoReference, 3.0, 1.0));
  v.push_back(ext_bounded("SCOREQ", 1.0, 5.0, ReferenceType::kNoReference, 3.0, 1.0));

  {
    MetricSpec s;
    s.name = "CER";
    s.range_lo = 0.0;
    s.direction = Direction::kLowerBetter;
    s.alpha = +1;
    s.activation = Activation::kRelu;
    s.oracle = OracleKind::kDeterministic;
    s.reference_type = ReferenceType::kText;
    s.score_center = 0.5;
    s.score_scale = 0.5;
    v.push_back(s);
  }
  {
    MetricSpec s = ext_bounded("ESTOI", 0.0, 1.0, ReferenceType::kSignal, 0.5, 0.25);
    s.oracle = OracleKind::kDeterministic;
    v.push_back(s);
  }
  v.push_back(ext_bounded("SpeechBERTScore", 0.0, 1.0, ReferenceType::kSignal, 0.5, 0.25));
  {
    // Table lists both [0,1] and [0,inf) for this row; the bounded,
    // higher-better similarity reading is implemented.
    MetricSpec s = ext_bounded("PhonemeSimilarity", 0.0, 1.0, ReferenceType::kSignal, 0.5, 0.25);
    s.oracle = OracleKind::kDeterministic;
    v.push_back(s);
  }
  {
    MetricSpec s;
    s.name = "SpeakerSimilarity";
    s.range_lo = -1.0;
    s.range_hi = 1.0;
    s.direction = Direction::kHigherBetter;
    s.alpha = -1;
    s.activation = Activation::kTanhUnit;
    s.oracle = OracleKind::kDeterministic;
    s.reference_type = ReferenceType::kSignal;
    s.score_center = 0.8;
    s.score_scale = 0.2;
    v.push_back(s);
  }
  {
    MetricSpec s;
    s.name = "MCD";
    s.range_lo = 0.0;
    s.direction = Direction::kLowerBetter;
    s.alpha = +1;
    s.activation = Activation::kRelu;
    s.oracle = OracleKind::kDeterministic;
    s.reference_type = ReferenceType::kSignal;
    s.score_center = 5.0;
    s.score_scale = 3.0;
    v.push_back(s);
  }
  {
    // Worst rank score is exactly 1 under the /M normalization, so the upper
    // boundary is treated as attainable.
    MetricSpec s;
    s.name = "RankingScore";
    s.range_lo = 0.0;
    s.range_hi = 1.0;
    s.direction = Direction::kLowerBetter;
    s.alpha = +1;
    s.activation = Activation::kScaledSigmoid;
    s.act_lo = 0.0;
    s.act_hi = 1.0;
    s.oracle = OracleKind::kDeterministic;
    s.reference_type = ReferenceType::kTextAndSignal;
    s.score_center = 0.5;
    s.score_scale = 0.25;
    v.push_back(s);
  }

  MetricRegistry reg(std::move(v));
  require(reg.size() == 22, "registry: default table must have exactly 22 rows");
  return reg;
}

MetricRegistry MetricRegistry::desk_extended() {
  MetricRegistry base = default_table();
  std::vector<MetricSpec> v = base.specs_;
  MetricSpec s;
  s.name = "SI_SNR";
  s.direction = Direction::kHigherBetter;
  s.alpha = -1;
  s.activation = Activation::kIdentity;
  s.oracle = OracleKind::kDeterministic;
  s.reference_type = ReferenceType::kSignal;
  s.score_center = 10.0;
  s.score_scale = 10.0;
  // Keep it next to SDR, its replacement in the extended table.
  v.insert(v.begin() + static_cast<long>(base.index_of("SDR")) + 1, s);
  return MetricRegistry(std::move(v));
}

const MetricSpec& MetricRegistry::at(std::size_t i) const {
  require(i < specs_.size(), "registry: index out of range");
  return specs_[i];
}

const MetricSpec& MetricRegistry::at(const std::string& name) const {
  return specs_[index_of(name)];
}

bool MetricRegistry::has(const std::string& name) const {
  return std::any_of(specs_.begin(), specs_.end(),
                     [&](const MetricSpec& s) { return s.name == name; });
}

std::size_t MetricRegistry::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < specs_.size(); ++i)
    if (specs_[i].name == name) return i;
  fail("registry: no metric named '" + name + "'");
}

MetricRegistry MetricRegistry::with_weight(const std::string& name, double w) const {
  require(w >= 0.0, "registry: negative weight");
  std::vector<MetricSpec> v = specs_;
  v[index_of(name)].weight = w;
  return MetricRegistry(std::move(v));
}

std::string MetricRegistry::to_json() const {
  json arr = json::array();
  for (const auto& s : specs_) {
    json row;
    row["name"] = s.name;
    row["range_lo"] = std::isfinite(s.range_lo) ? json(s.range_lo) : json("-inf");
    row["range_hi"] = std::isfinite(s.range_hi) ? json(s.range_hi) : json("inf");
    row["direction"] = dir_name(s.direction);
    row["alpha"] = s.alpha;
    row["weight"] = s.weight;
    row["activation"] = act_name(s.activation);
    if (s.activation == Activation::kScaledSigmoid) {
      row["act_lo"] = s.act_lo;
      row["act_hi"] = s.act_hi;
    }
    row["oracle"] = s.oracle == OracleKind::kDeterministic ? "deterministic" : "external";
    row["reference_type"] = ref_name(s.reference_type);
    row["score_center"] = s.score_center;
    row["score_scale"] = s.score_scale;
    arr.push_back(row);
  }
  return json{{"metrics", arr}}.dump(2);
}

MetricRegistry MetricRegistry::from_json_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    fail(std::string("registry: bad JSON: ") + e.what());
  }
  require(doc.contains("metrics") && doc["metrics"].is_array(), "registry: missing metrics array");
  std::vector<MetricSpec> v;
  for (const auto& row : doc["metrics"]) {
    MetricSpec s;
    s.name = row.at("name").get<std::string>();
    const auto bound = [](const json& j, double inf_val) {
      return j.is_string() ? inf_val : j.get<double>();
    };
    s.range_lo = bound(row.at("range_lo"), -kInf);
    s.range_hi = bound(row.at("range_hi"), kInf);
    s.direction = dir_from(row.at("direction").get<std::string>());
    s.alpha = row.at("alpha").get<int>();
    s.weight = row.at("weight").get<double>();
    s.activation = act_from(row.at("activation").get<std::string>());
    if (s.activation == Activation::kScaledSigmoid) {
      s.act_lo = row.at("act_lo").get<double>();
      s.act_hi = row.at("act_hi").get<double>();
    }
    s.oracle = row.at("oracle").get<std::string>() == "deterministic"
                   ? OracleKind::kDeterministic
                   : OracleKind::kExternalOutOfScope;
    s.reference_type = ref_from(row.at("reference_type").get<std::string>());
    s.score_center = row.at("score_center").get<double>();
    s.score_scale = row.at("score_scale").get<double>();
    v.push_back(std::move(s));
  }
  return MetricRegistry(std::move(v));
}

std::uint64_t MetricRegistry::hash() const {
  const std::string text = to_json();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double apply_range_activation(const MetricSpec& spec, double z) {
  switch (spec.activation) {
    case Activation::kIdentity:
      return z;
    case Activation::kRelu:
      return z > 0.0 ? z : 0.0;
    case Activation::kScaledSigmoid:
      return spec.act_lo + (spec.act_hi - spec.act_lo) / (1.0 + std::exp(-z));
    case Activation::kTanhUnit:
      return std::tanh(z);
  }
  return z;
}

void validate(const MetricRegistry& reg, const MetricVector& mv) {
  require(mv.values.size() == reg.size() && mv.present.size() == reg.size(),
          "MetricVector: size does not match registry");
  for (std::size_t i = 0; i < reg.size(); ++i) {
    if (!mv.present[i]) continue;
    require(std::isfinite(mv.values[i]), "MetricVector: non-finite " + reg.at(i).name);
    require(reg.at(i).in_range(mv.values[i]),
            "MetricVector: " + reg.at(i).name + " outside its range");
  }
}

}  // namespace seqa::metrics
