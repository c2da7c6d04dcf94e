#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"

#include "attnlab/linalg.hpp"

namespace attnlab {

struct Residual {
  std::string id;
  double value = 0.0;
  double tolerance = 0.0;
  bool pass = true;
  // informational entries are reported but never fail the report (the
  // relation they test does not apply at this point)
  bool informational = false;
  std::string note;
};

struct ResidualReport {
  std::string title;
  std::vector<Residual> items;

  Residual& add(std::string id, double value, double tol, bool informational = false, std::string note = {}) {
    if (!std::isfinite(value)) throw NonFiniteError("residual " + id + " is not finite");
    items.push_back({std::move(id), value, tol, std::abs(value) <= tol, informational, std::move(note)});
    return items.back();
  }

  bool all_pass() const {
    for (const auto& r : items)
      if (!r.informational && !r.pass) return false;
    return true;
  }

  double value(const std::string& id) const {
    for (const auto& r : items)
      if (r.id == id) return r.value;
    throw std::out_of_range("no residual named " + id);
  }

  const Residual& at(const std::string& id) const {
    for (const auto& r : items)
      if (r.id == id) return r;
    throw std::out_of_range("no residual named " + id);
  }

  double max_value() const {
    double m = 0.0;
    for (const auto& r : items)
      if (!r.informational) m = std::max(m, std::abs(r.value));
    return m;
  }

  void append(const ResidualReport& other, const std::string& prefix = {}) {
    for (auto r : other.items) {
      r.id = prefix + r.id;
      items.push_back(std::move(r));
    }
  }
};

inline nlohmann::ordered_json to_json(const ResidualReport& r) {
  nlohmann::ordered_json j;
  j["title"] = r.title;
  j["pass"] = r.all_pass();
  auto& arr = j["residuals"] = nlohmann::ordered_json::array();
  for (const auto& x : r.items) {
    nlohmann::ordered_json e;
    e["id"] = x.id;
    e["value"] = x.value;
    e["tolerance"] = x.tolerance;
    e["pass"] = x.pass;
    if (x.informational) e["informational"] = true;
    if (!x.note.empty()) e["note"] = x.note;
    arr.push_back(std::move(e));
  }
  return j;
}

}  // namespace attnlab
