#pragma once

#include <json.hpp>

#include "apex/error.hpp"
#include "apex/nn.hpp"

namespace apex::nn {

inline nlohmann::ordered_json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::ordered_json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  j["data"] = std::vector<double>(m.data(), m.data() + m.size());
  return j;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) != data.size()) {
    throw Error("checkpoint matrix has inconsistent shape");
  }
  Eigen::MatrixXd m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

inline nlohmann::ordered_json mlp_to_json(const Mlp& mlp) {
  const auto& spec = mlp.spec();
  nlohmann::ordered_json j;
  j["input"] = spec.input;
  j["hidden"] = spec.hidden;
  j["output"] = spec.output;
  j["activation"] = to_string(spec.activation);
  j["output_bias"] = spec.output_bias;
  j["linear_skip"] = spec.linear_skip;
  auto params = nlohmann::ordered_json::array();
  ConstParamList list;
  mlp.collect(list);
  for (const auto* p : list) params.push_back(matrix_to_json(*p));
  j["parameters"] = std::move(params);
  return j;
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  MlpSpec spec;
  spec.input = j.at("input").get<std::size_t>();
  spec.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  spec.output = j.at("output").get<std::size_t>();
  spec.activation = activation_from_string(j.at("activation").get<std::string>());
  spec.output_bias = j.at("output_bias").get<bool>();
  spec.linear_skip = j.at("linear_skip").get<bool>();
  Mlp mlp = Mlp::zeros(spec);
  ParamList list;
  mlp.collect(list);
  const auto& params = j.at("parameters");
  if (params.size() != list.size()) throw Error("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < list.size(); ++i) {
    Eigen::MatrixXd m = matrix_from_json(params[i]);
    if (m.rows() != list[i]->rows() || m.cols() != list[i]->cols()) {
      throw Error("checkpoint parameter shape mismatch");
    }
    *list[i] = std::move(m);
  }
  return mlp;
}

}  // namespace apex::nn
