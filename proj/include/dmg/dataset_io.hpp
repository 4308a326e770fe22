#pragma once

// JSON Lines persistence for datasets: one transition per line with keys
// "state", "action", "reward", "next_state", "terminal". Discrete datasets
// use integer ids, continuous ones arrays of numbers.

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "dmg/mdp.hpp"

namespace dmg {

namespace detail {

inline nlohmann::ordered_json encode_point(const std::vector<double>& x, Representation rep) {
  if (rep == Representation::discrete) return static_cast<std::int64_t>(x.at(0));
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (double v : x) arr.push_back(v);
  return arr;
}

inline std::vector<double> decode_point(const nlohmann::json& j, Representation& rep, bool& rep_known,
                                        const std::string& where) {
  Representation here;
  std::vector<double> out;
  if (j.is_number_integer() || j.is_number_unsigned()) {
    here = Representation::discrete;
    const auto id = j.get<std::int64_t>();
    if (id < 0) throw std::runtime_error(where + ": negative id");
    out.push_back(static_cast<double>(id));
  } else if (j.is_array()) {
    here = Representation::continuous;
    for (const auto& x : j) {
      if (!x.is_number()) throw std::runtime_error(where + ": array entries must be numbers");
      out.push_back(x.get<double>());
    }
  } else {
    throw std::runtime_error(where + ": expected an integer or an array of numbers");
  }
  if (!rep_known) {
    rep = here;
    rep_known = true;
  } else if (rep != here) {
    throw std::runtime_error(where + ": mixed state/action representations");
  }
  return out;
}

}  // namespace detail

inline std::string transition_to_jsonl(const Transition& t, Representation rep) {
  nlohmann::ordered_json j;
  j["state"] = detail::encode_point(t.state, rep);
  j["action"] = detail::encode_point(t.action, rep);
  j["reward"] = t.reward;
  j["next_state"] = detail::encode_point(t.next_state, rep);
  j["terminal"] = t.terminal;
  return j.dump();
}

inline void write_dataset_jsonl(std::ostream& out, const Dataset& dataset) {
  for (const auto& t : dataset.transitions) out << transition_to_jsonl(t, dataset.representation) << '\n';
}

inline void write_dataset_jsonl(const std::string& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_dataset_jsonl(out, dataset);
  if (!out) throw std::runtime_error("failed writing " + path);
}

inline Dataset read_dataset_jsonl(std::istream& in) {
  Dataset ds;
  bool rep_known = false;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
    for (const char* key : {"state", "action", "reward", "next_state", "terminal"})
      if (!j.contains(key)) throw std::runtime_error(where + ": missing key \"" + key + "\"");
    Transition t;
    t.state = detail::decode_point(j["state"], ds.representation, rep_known, where);
    t.action = detail::decode_point(j["action"], ds.representation, rep_known, where);
    t.next_state = detail::decode_point(j["next_state"], ds.representation, rep_known, where);
    if (!j["reward"].is_number()) throw std::runtime_error(where + ": reward must be a number");
    t.reward = j["reward"].get<double>();
    if (!j["terminal"].is_boolean()) throw std::runtime_error(where + ": terminal must be a boolean");
    t.terminal = j["terminal"].get<bool>();
    ds.transitions.push_back(std::move(t));
  }
  if (ds.transitions.empty()) throw std::runtime_error("dataset file contains no transitions");
  return ds;
}

inline Dataset read_dataset_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset " + path);
  return read_dataset_jsonl(in);
}

}  // namespace dmg
