#include "koopman_lab/checkpoint.hpp"

#include <fstream>

#include <json.hpp>

#include "koopman_lab/dataset.hpp"
#include "koopman_lab/errors.hpp"

namespace koopman_lab::nn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path with_ext(const fs::path& stem, const char* ext) {
  fs::path p = stem;
  p += ext;
  return p;
}

}  // namespace

void save_checkpoint(const fs::path& stem, const ParameterSet& params, const std::string& config_json) {
  if (stem.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(stem.parent_path(), ec);
    if (ec) throw IoError("cannot create checkpoint directory '" + stem.parent_path().string() + "'");
  }
  std::size_t total = params.scalar_count();
  Matrix flat(1, static_cast<Eigen::Index>(total));
  json entries = json::array();
  std::size_t offset = 0;
  for (const auto& p : params) {
    for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) flat(0, static_cast<Eigen::Index>(offset++)) = p.value(r, c);
    }
    entries.push_back({{"name", p.name},
                       {"shape", {p.value.rows(), p.value.cols()}},
                       {"offset", offset - static_cast<std::size_t>(p.value.size())},
                       {"group", p.group},
                       {"decay", p.decay}});
  }
  const fs::path blob = with_ext(stem, ".f64");
  dynsys::write_f64_blob(blob, flat);
  json header = {{"format", "koopman_lab.parameters"},
                 {"version", 1},
                 {"blob", blob.filename().string()},
                 {"scalar_count", total},
                 {"parameters", entries},
                 {"config", json::parse(config_json)}};
  std::ofstream out(with_ext(stem, ".json"), std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint header '" + with_ext(stem, ".json").string() + "'");
  out << header.dump(2) << '\n';
}

LoadedCheckpoint load_checkpoint(const fs::path& stem) {
  fs::path header_path = with_ext(stem, ".json");
  if (!fs::exists(header_path) && stem.extension() == ".json") header_path = stem;
  std::ifstream in(header_path);
  if (!in) throw IoError("cannot open checkpoint header '" + header_path.string() + "'");
  json header;
  try {
    header = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint header: " + std::string(e.what()));
  }
  if (header.value("format", "") != "koopman_lab.parameters") throw IoError("not a koopman_lab checkpoint");
  const auto total = header.at("scalar_count").get<std::size_t>();
  const fs::path blob = header_path.parent_path() / header.at("blob").get<std::string>();
  const Matrix flat = dynsys::read_f64_blob(blob, 1, total);
  LoadedCheckpoint out;
  for (const auto& e : header.at("parameters")) {
    const auto rows = e.at("shape")[0].get<Eigen::Index>();
    const auto cols = e.at("shape")[1].get<Eigen::Index>();
    const auto offset = e.at("offset").get<std::size_t>();
    if (offset + static_cast<std::size_t>(rows * cols) > total) throw IoError("checkpoint entry exceeds blob size");
    Matrix v(rows, cols);
    std::size_t k = offset;
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) v(r, c) = flat(0, static_cast<Eigen::Index>(k++));
    }
    out.params.add(e.at("name").get<std::string>(), std::move(v), e.value("group", "main"), e.value("decay", true));
  }
  out.config_json = header.at("config").dump();
  return out;
}

void assign_parameters(ParameterSet& target, const ParameterSet& source) {
  for (auto& p : target) {
    const auto& s = source[source.index_of(p.name)];
    if (s.value.rows() != p.value.rows() || s.value.cols() != p.value.cols()) {
      throw InvalidArgument("checkpoint parameter '" + p.name + "' has shape " +
                            grad::shape_string({s.value.rows(), s.value.cols()}) + ", model expects " +
                            grad::shape_string({p.value.rows(), p.value.cols()}));
    }
    p.value = s.value;
  }
}

}  // namespace koopman_lab::nn
