#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "scns/error.hpp"
#include "scns/training.hpp"

namespace scns {

// Plain INI-style document:
//
//   seed = 42            # top level, before any section
//   [dataset]
//   classes = 10
//   [model]
//   hidden = 64,64
//
// Full-line comments start with '#' or ';'. Every key is known in advance;
// anything else is an error that cites the line.

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

/// Shortest decimal that reads back to the same double.
inline std::string format_real(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct Field {
  std::string section;  // "" for top level
  std::string name;
  std::string type;     // used in type-mismatch messages
  std::function<void(ExperimentConfig&, const std::string&)> set;  // throws std::invalid_argument
  std::function<std::string(const ExperimentConfig&)> get;

  std::string key() const { return section.empty() ? name : "[" + section + "]." + name; }
};

inline std::uint64_t to_unsigned(const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) throw std::invalid_argument(v);
  return out;
}

inline double to_real(const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw std::invalid_argument(v);
  }
  return out;
}

inline bool to_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument(v);
}

template <class T>
Field size_field(std::string section, std::string name, T ExperimentConfig::*group, std::size_t T::*member) {
  return {section, name, "non-negative integer",
          [=](ExperimentConfig& c, const std::string& v) { (c.*group).*member = to_unsigned(v); },
          [=](const ExperimentConfig& c) { return std::to_string((c.*group).*member); }};
}

template <class T>
Field real_field(std::string section, std::string name, T ExperimentConfig::*group, double T::*member) {
  return {section, name, "real",
          [=](ExperimentConfig& c, const std::string& v) { (c.*group).*member = to_real(v); },
          [=](const ExperimentConfig& c) { return format_real((c.*group).*member); }};
}

template <class T>
Field string_field(std::string section, std::string name, T ExperimentConfig::*group,
                   std::string T::*member) {
  return {section, name, "string",
          [=](ExperimentConfig& c, const std::string& v) { (c.*group).*member = v; },
          [=](const ExperimentConfig& c) { return (c.*group).*member; }};
}

template <class T>
Field size_list_field(std::string section, std::string name, T ExperimentConfig::*group,
                      std::vector<std::size_t> T::*member) {
  return {section, name, "comma-separated list of non-negative integers",
          [=](ExperimentConfig& c, const std::string& v) {
            std::vector<std::size_t> out;
            for (const auto& item : split(v, ',')) out.push_back(to_unsigned(item));
            (c.*group).*member = out;
          },
          [=](const ExperimentConfig& c) {
            std::string s;
            for (auto x : (c.*group).*member) s += (s.empty() ? "" : ",") + std::to_string(x);
            return s;
          }};
}

inline const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"", "seed", "non-negative integer",
                 [](C& c, const std::string& v) { c.seed = to_unsigned(v); },
                 [](const C& c) { return c.seed ? std::to_string(*c.seed) : std::string(); }});

    f.push_back(size_field("dataset", "classes", &C::dataset, &DatasetSpec::classes));
    f.push_back(size_field("dataset", "per_class", &C::dataset, &DatasetSpec::per_class));
    f.push_back(size_field("dataset", "dim", &C::dataset, &DatasetSpec::dim));
    f.push_back(real_field("dataset", "separation", &C::dataset, &DatasetSpec::separation));
    f.push_back(size_field("dataset", "eval_per_class", &C::dataset, &DatasetSpec::eval_per_class));
    f.push_back(string_field("dataset", "features", &C::dataset, &DatasetSpec::features));
    f.push_back(string_field("dataset", "eval_features", &C::dataset, &DatasetSpec::eval_features));
    f.push_back(string_field("dataset", "label_embeddings", &C::dataset, &DatasetSpec::label_embeddings));
    f.push_back({"dataset", "class_names", "'|'-separated list of names",
                 [](C& c, const std::string& v) { c.dataset.class_names = split(v, '|'); },
                 [](const C& c) {
                   std::string s;
                   for (const auto& n : c.dataset.class_names) s += (s.empty() ? "" : "|") + n;
                   return s;
                 }});

    f.push_back({"sampler", "variant", "one of uniform, class, instance",
                 [](C& c, const std::string& v) {
                   try {
                     c.sampler.variant = parse_sampler_variant(v);
                   } catch (const Error&) {
                     throw std::invalid_argument(v);
                   }
                 },
                 [](const C& c) { return to_string(c.sampler.variant); }});
    f.push_back(size_field("sampler", "k", &C::sampler, &SamplerSpec::k));
    f.push_back(real_field("sampler", "sharpness", &C::sampler, &SamplerSpec::sharpness));
    f.push_back(size_field("sampler", "negatives", &C::sampler, &SamplerSpec::negatives));

    f.push_back(real_field("loss", "alpha", &C::loss, &LossSpec::alpha));
    f.push_back(real_field("loss", "beta", &C::loss, &LossSpec::beta));
    f.push_back(real_field("loss", "gamma_plus", &C::loss, &LossSpec::gamma_plus));
    f.push_back(real_field("loss", "gamma_minus", &C::loss, &LossSpec::gamma_minus));
    f.push_back(real_field("loss", "zeta", &C::loss, &LossSpec::zeta));
    f.push_back(real_field("loss", "margin", &C::loss, &LossSpec::margin));
    f.push_back(real_field("loss", "tau", &C::loss, &LossSpec::tau));
    f.push_back(real_field("loss", "nce_weight", &C::loss, &LossSpec::nce_weight));
    f.push_back(real_field("loss", "triplet_weight", &C::loss, &LossSpec::triplet_weight));
    f.push_back({"loss", "similarity", "one of pearson, cka",
                 [](C& c, const std::string& v) {
                   try {
                     c.loss.similarity = parse_kd_similarity(v);
                   } catch (const Error&) {
                     throw std::invalid_argument(v);
                   }
                 },
                 [](const C& c) { return to_string(c.loss.similarity); }});

    f.push_back(size_field("memory", "queue_size", &C::memory, &MemorySpec::queue_size));
    f.push_back(real_field("memory", "gamma", &C::memory, &MemorySpec::gamma));
    f.push_back(real_field("memory", "tau", &C::memory, &MemorySpec::tau));

    f.push_back(real_field("optimizer", "lr", &C::optimizer, &OptimizerSpec::lr));
    f.push_back(real_field("optimizer", "momentum", &C::optimizer, &OptimizerSpec::momentum));
    f.push_back(real_field("optimizer", "weight_decay", &C::optimizer, &OptimizerSpec::weight_decay));
    f.push_back(size_field("optimizer", "epochs", &C::optimizer, &OptimizerSpec::epochs));
    f.push_back(size_field("optimizer", "batch_size", &C::optimizer, &OptimizerSpec::batch_size));
    f.push_back(size_list_field("optimizer", "decay_epochs", &C::optimizer, &OptimizerSpec::decay_epochs));
    f.push_back(real_field("optimizer", "decay_factor", &C::optimizer, &OptimizerSpec::decay_factor));
    f.push_back(real_field("optimizer", "stop_at_train_acc", &C::optimizer, &OptimizerSpec::stop_at_train_acc));

    f.push_back(size_list_field("model", "hidden", &C::model, &ModelSpec::hidden));
    f.push_back(size_field("model", "metric_dim", &C::model, &ModelSpec::metric_dim));
    f.push_back(size_list_field("model", "teacher_hidden", &C::model, &ModelSpec::teacher_hidden));
    f.push_back(size_field("model", "teacher_metric_dim", &C::model, &ModelSpec::teacher_metric_dim));
    f.push_back(size_field("model", "teacher_epochs", &C::model, &ModelSpec::teacher_epochs));
    f.push_back(string_field("model", "teacher_checkpoint", &C::model, &ModelSpec::teacher_checkpoint));
    f.push_back({"model", "adapter", "true or false",
                 [](C& c, const std::string& v) { c.model.adapter = to_bool(v); },
                 [](const C& c) { return std::string(c.model.adapter ? "true" : "false"); }});

    f.push_back({"convergence", "mode", "one of supervised, kd",
                 [](C& c, const std::string& v) {
                   try {
                     c.convergence.mode = parse_training_mode(v);
                   } catch (const Error&) {
                     throw std::invalid_argument(v);
                   }
                 },
                 [](const C& c) { return to_string(c.convergence.mode); }});
    f.push_back({"convergence", "variants", "comma-separated sampler variants",
                 [](C& c, const std::string& v) {
                   std::vector<SamplerVariant> out;
                   for (const auto& item : split(v, ',')) {
                     try {
                       out.push_back(parse_sampler_variant(item));
                     } catch (const Error&) {
                       throw std::invalid_argument(item);
                     }
                   }
                   c.convergence.variants = out;
                 },
                 [](const C& c) {
                   std::string s;
                   for (auto v : c.convergence.variants) s += (s.empty() ? "" : ",") + to_string(v);
                   return s;
                 }});
    f.push_back(size_field("convergence", "seeds", &C::convergence, &ConvergenceSpec::seeds));
    f.push_back(real_field("convergence", "threshold", &C::convergence, &ConvergenceSpec::threshold));

    f.push_back(size_field("theory", "M", &C::theory, &TheorySpec::m));
    f.push_back(size_field("theory", "k", &C::theory, &TheorySpec::k));
    f.push_back(size_field("theory", "b", &C::theory, &TheorySpec::b));
    f.push_back({"theory", "trials", "non-negative integer",
                 [](C& c, const std::string& v) { c.theory.trials = to_unsigned(v); },
                 [](const C& c) { return std::to_string(c.theory.trials); }});
    f.push_back({"theory", "probs", "comma-separated list of reals",
                 [](C& c, const std::string& v) {
                   std::vector<double> out;
                   for (const auto& item : split(v, ',')) out.push_back(to_real(item));
                   c.theory.probs = out;
                 },
                 [](const C& c) {
                   std::string s;
                   for (double p : c.theory.probs) s += (s.empty() ? "" : ",") + format_real(p);
                   return s;
                 }});
    f.push_back(size_field("theory", "anchors", &C::theory, &TheorySpec::anchors));
    f.push_back(real_field("theory", "loss", &C::theory, &TheorySpec::loss));
    return f;
  }();
  return table;
}

}  // namespace config_detail

/// Parses and validates a config document. `seed_override` replaces (or
/// supplies) the seed. Errors are ParseError naming the key and its line.
inline ExperimentConfig parse_config_text(const std::string& text,
                                          std::optional<std::uint64_t> seed_override = std::nullopt) {
  using namespace config_detail;
  static const std::set<std::string> sections{"dataset", "sampler", "loss",  "memory",
                                              "optimizer", "model", "convergence", "theory"};
  ExperimentConfig cfg;
  std::map<std::string, std::size_t> seen;  // key -> line
  std::string section;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    const std::string at = "config: line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(at + "unterminated section header", line_no);
      section = trim(line.substr(1, line.size() - 2));
      if (!sections.count(section)) throw ParseError(at + "unknown section [" + section + "]", line_no);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(at + "expected 'key = value'", line_no);
    const std::string name = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const Field* field = nullptr;
    for (const auto& f : fields()) {
      if (f.section == section && f.name == name) field = &f;
    }
    const std::string key = section.empty() ? name : "[" + section + "]." + name;
    if (field == nullptr) throw ParseError(at + "unknown key " + key, line_no);
    if (seen.count(key)) {
      throw ParseError(at + key + " already set on line " + std::to_string(seen[key]), line_no);
    }
    seen[key] = line_no;
    try {
      field->set(cfg, value);
    } catch (const std::invalid_argument&) {
      throw ParseError(at + key + " expects " + field->type + ", got '" + value + "'", line_no);
    } catch (const std::out_of_range&) {
      throw ParseError(at + key + " value '" + value + "' out of range", line_no);
    }
  }
  if (seed_override) cfg.seed = seed_override;
  try {
    validate(cfg);
  } catch (const ConfigValueError& e) {
    const auto it = seen.find(e.key());
    if (it == seen.end()) throw ParseError(e.what(), 0);
    throw ParseError("config: line " + std::to_string(it->second) + ": " +
                         std::string(e.what()).substr(std::string("config: ").size()),
                     it->second);
  }
  return cfg;
}

inline ExperimentConfig parse_config(const std::string& path,
                                     std::optional<std::uint64_t> seed_override = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw Error("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), seed_override);
}

/// Canonical form: every key, in table order, values in shortest exact form.
inline std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  std::string section = "";
  for (const auto& f : config_detail::fields()) {
    if (f.section != section) {
      section = f.section;
      out += "\n[" + section + "]\n";
    }
    if (f.section.empty() && !cfg.seed) continue;
    out += f.name + " = " + f.get(cfg) + "\n";
  }
  return out;
}

}  // namespace scns
