#ifndef FEDPPD_CHECKPOINT_HPP
#define FEDPPD_CHECKPOINT_HPP

#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "fedppd/error.hpp"
#include "fedppd/io.hpp"
#include "fedppd/model.hpp"

namespace fedppd {

// A model spec together with its parameters.
struct StoredModel {
  ModelSpec spec;
  ParamVector params;
};

// Checkpoint document:
//   {"format": "fedppd-checkpoint", "version": 1, "round": t,
//    "teacher": {"input_dim", "hidden", "classes", "role", "params"},
//    "student": {...} | null}
struct Checkpoint {
  std::size_t round = 0;
  std::optional<StoredModel> teacher;
  std::optional<StoredModel> student;
};

inline nlohmann::json spec_to_json(const ModelSpec& s) {
  return {{"input_dim", s.input_dim}, {"hidden", s.hidden}, {"classes", s.classes}, {"role", to_string(s.role)}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  try {
    s.input_dim = j.at("input_dim").get<std::size_t>();
    s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    s.classes = j.at("classes").get<std::size_t>();
    const std::string role = j.value("role", "teacher");
    if (role != "teacher" && role != "student") throw FormatError("unknown model role '" + role + "'");
    s.role = role == "teacher" ? Role::teacher : Role::student;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model spec: ") + e.what());
  }
  return s;
}

inline nlohmann::json model_to_json(const StoredModel& m) {
  check_layout(m.spec, m.params);
  nlohmann::json j = spec_to_json(m.spec);
  j["params"] = m.params.values;
  return j;
}

inline StoredModel model_from_json(const nlohmann::json& j) {
  StoredModel m;
  m.spec = spec_from_json(j);
  try {
    m.params.values = j.at("params").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model params: ") + e.what());
  }
  if (m.params.size() != m.spec.param_count()) {
    throw FormatError("checkpoint has " + std::to_string(m.params.size()) + " parameters, spec requires " +
                      std::to_string(m.spec.param_count()));
  }
  return m;
}

inline nlohmann::json checkpoint_to_json(const Checkpoint& c) {
  nlohmann::json j;
  j["format"] = "fedppd-checkpoint";
  j["version"] = 1;
  j["round"] = c.round;
  j["teacher"] = c.teacher ? model_to_json(*c.teacher) : nlohmann::json(nullptr);
  j["student"] = c.student ? model_to_json(*c.student) : nlohmann::json(nullptr);
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("format", "") != "fedppd-checkpoint") {
    throw FormatError("not a fedppd checkpoint");
  }
  if (j.value("version", 0) != 1) throw FormatError("unsupported checkpoint version");
  Checkpoint c;
  c.round = j.value("round", std::size_t{0});
  if (j.contains("teacher") && !j["teacher"].is_null()) c.teacher = model_from_json(j["teacher"]);
  if (j.contains("student") && !j["student"].is_null()) c.student = model_from_json(j["student"]);
  if (!c.teacher && !c.student) throw FormatError("checkpoint holds no model");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_text(path, dump_json(checkpoint_to_json(c)) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
  return checkpoint_from_json(read_json(path));
}

}  // namespace fedppd

#endif  // FEDPPD_CHECKPOINT_HPP
