#include "query_file.hpp"

#include <fstream>
#include <json.hpp>
#include <sstream>

#include "apex/error.hpp"

namespace apex::cli {

namespace {

using nlohmann::json;

struct Preset {
  const char* name;
  std::vector<Constraint> bounds;
};

const std::vector<Preset>& presets() {
  static const std::vector<Preset> table = {
      {"lipinski", {{"mw", -kInf, 500}, {"logp", -kInf, 5}, {"hbd", -kInf, 5}, {"hba", -kInf, 10}}},
      {"veber", {{"rotb", -kInf, 10}, {"tpsa", -kInf, 140}}},
      {"pfizer_3_75", {{"logp", -kInf, 3}, {"tpsa", 75, kInf}}},
      {"astex_ro3",
       {{"mw", -kInf, 300},
        {"logp", -kInf, 3},
        {"hbd", -kInf, 3},
        {"hba", -kInf, 3},
        {"rotb", -kInf, 3},
        {"tpsa", -kInf, 60}}},
  };
  return table;
}

double bound(const json& c, const char* key, double fallback) {
  if (!c.contains(key) || c[key].is_null()) return fallback;
  if (!c[key].is_number()) throw Error(std::string("constraint '") + key + "' must be a number");
  return c[key].get<double>();
}

}  // namespace

EngineVariant variant_from_string(std::string_view name) {
  if (name == "stream") return EngineVariant::stream;
  if (name == "batched") return EngineVariant::batched;
  throw Error("unknown engine variant '" + std::string(name) + "' (expected stream or batched)");
}

std::string to_string(EngineVariant v) { return v == EngineVariant::stream ? "stream" : "batched"; }

std::vector<Constraint> preset_constraints(std::string_view name) {
  for (const auto& p : presets()) {
    if (name == p.name) return p.bounds;
  }
  throw Error("unknown constraint preset '" + std::string(name) + "'");
}

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& p : presets()) out.emplace_back(p.name);
  return out;
}

QueryFile parse_query_file(std::string_view text, const ContributionTable* table) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(std::string("malformed query file: ") + e.what());
  }
  if (!doc.is_object()) throw Error("query file must be a JSON object");
  for (const auto& [key, _] : doc.items()) {
    if (key != "objective" && key != "presets" && key != "constraints" && key != "k" &&
        key != "engine") {
      throw Error("unknown query field '" + key + "'");
    }
  }

  QueryFile out;
  try {
    if (!doc.contains("objective")) throw Error("query file has no objective");
    const auto& obj = doc["objective"];
    if (obj.is_string()) {
      out.query.objective = obj.get<std::string>();
    } else {
      out.query.objective = obj.at("task").get<std::string>();
      if (obj.contains("direction")) {
        out.query.direction = direction_from_string(obj["direction"].get<std::string>());
      }
    }
    if (doc.contains("presets")) {
      for (const auto& p : doc["presets"]) {
        for (auto& c : preset_constraints(p.get<std::string>())) out.query.constraints.push_back(c);
      }
    }
    if (doc.contains("constraints")) {
      for (const auto& c : doc["constraints"]) {
        Constraint con;
        con.task = c.at("task").get<std::string>();
        con.lower = bound(c, "lower", -kInf);
        con.upper = bound(c, "upper", kInf);
        out.query.constraints.push_back(std::move(con));
      }
    }
    if (doc.contains("k")) {
      const auto& k = doc["k"];
      if (!k.is_number_integer() || k.get<std::int64_t>() < 0) throw Error("k must be a non-negative integer");
      out.query.k = k.get<std::uint64_t>();
    }
    if (doc.contains("engine")) {
      const auto& e = doc["engine"];
      if (e.contains("variant")) out.variant = variant_from_string(e["variant"].get<std::string>());
      if (e.contains("chunk_size")) {
        out.chunk_size = e["chunk_size"].get<std::uint64_t>();
        if (out.chunk_size == 0) throw Error("chunk_size must be positive");
      }
    }
  } catch (const json::exception& e) {
    throw Error(std::string("malformed query file: ") + e.what());
  }
  validate_query(out.query, table);
  return out;
}

QueryFile load_query_file(const std::string& path, const ContributionTable* table) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open query file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_query_file(buf.str(), table);
}

}  // namespace apex::cli
