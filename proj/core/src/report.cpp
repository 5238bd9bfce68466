#include "koopman_lab/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "koopman_lab/errors.hpp"

namespace koopman_lab::report {

using nlohmann::ordered_json;

namespace {

std::string format_mse(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string column_name(const ModelMetrics& m, const rollout::PlanMetrics& p) {
  return m.name + ":k" + std::to_string(p.plan.reencode_period);
}

std::set<std::pair<std::size_t, std::size_t>> grid_of(const ModelMetrics& m) {
  std::set<std::pair<std::size_t, std::size_t>> g;
  for (const auto& p : m.table.rows) g.insert({p.plan.horizon, p.plan.reencode_period});
  return g;
}

}  // namespace

std::string metrics_to_json(const ExperimentMetrics& metrics) {
  ordered_json models = ordered_json::array();
  for (const auto& m : metrics.models) {
    ordered_json plans = ordered_json::array();
    for (const auto& p : m.table.rows) {
      ordered_json e;
      e["label"] = p.label;
      e["horizon"] = p.plan.horizon;
      e["reencode_period"] = p.plan.reencode_period;
      e["mse"] = p.exploded ? ordered_json(nullptr) : ordered_json(p.mse);
      e["exploded"] = p.exploded;
      e["exploded_trajectories"] = p.exploded_trajectories;
      plans.push_back(std::move(e));
    }
    ordered_json best = ordered_json::object();
    std::set<std::size_t> horizons;
    for (const auto& p : m.table.rows) horizons.insert(p.plan.horizon);
    for (std::size_t h : horizons) {
      const auto* b = m.table.best_periodic(h);
      if (b == nullptr) continue;
      best["h" + std::to_string(h)] = {{"reencode_period", b->plan.reencode_period}, {"mse", b->mse}};
    }
    ordered_json entry;
    entry["name"] = m.name;
    entry["koopman"] = m.koopman;
    entry["plans"] = std::move(plans);
    entry["best_periodic"] = std::move(best);
    models.push_back(std::move(entry));
  }
  ordered_json j;
  j["schema_version"] = 1;
  j["environment"] = metrics.environment;
  j["models"] = std::move(models);
  return j.dump(2) + "\n";
}

ExperimentMetrics metrics_from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const ordered_json::exception& e) {
    throw IoError(std::string("malformed metrics: ") + e.what());
  }
  ExperimentMetrics out;
  try {
    if (j.at("schema_version").get<int>() != 1) throw IoError("unsupported metrics schema_version");
    out.environment = j.at("environment").get<std::string>();
    for (const auto& m : j.at("models")) {
      ModelMetrics mm;
      mm.name = m.at("name").get<std::string>();
      mm.koopman = m.value("koopman", true);
      for (const auto& p : m.at("plans")) {
        rollout::PlanMetrics pm;
        pm.plan.horizon = p.at("horizon").get<std::size_t>();
        pm.plan.reencode_period = p.at("reencode_period").get<std::size_t>();
        pm.label = p.value("label", pm.plan.label());
        pm.exploded = p.value("exploded", false);
        pm.exploded_trajectories = p.value("exploded_trajectories", std::size_t{0});
        const auto& mse = p.at("mse");
        pm.mse = mse.is_null() ? std::numeric_limits<double>::infinity() : mse.get<double>();
        if (mse.is_null()) pm.exploded = true;
        mm.table.rows.push_back(std::move(pm));
      }
      out.models.push_back(std::move(mm));
    }
  } catch (const ordered_json::exception& e) {
    throw IoError(std::string("metrics file: ") + e.what());
  }
  return out;
}

ExperimentMetrics read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return metrics_from_json(ss.str());
}

std::string curve_csv(const rollout::PlanMetrics& plan) {
  std::string out = "step,mse\n";
  char buf[64];
  for (std::size_t i = 0; i < plan.curve.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i + 1, plan.curve[i]);
    out += buf;
  }
  return out;
}

ComparisonTable compare_report(const std::vector<ExperimentMetrics>& inputs) {
  if (inputs.empty()) throw InvalidArgument("compare_report: no metrics given");
  // Reference grid: model name -> (horizon, k) pairs of the first input.
  std::map<std::string, std::set<std::pair<std::size_t, std::size_t>>> grid;
  for (const auto& m : inputs.front().models) grid[m.name] = grid_of(m);
  for (std::size_t i = 1; i < inputs.size(); ++i) {
    std::map<std::string, std::set<std::pair<std::size_t, std::size_t>>> other;
    for (const auto& m : inputs[i].models) other[m.name] = grid_of(m);
    if (other != grid) {
      throw InvalidArgument("compare_report: input " + std::to_string(i) + " (" + inputs[i].environment +
                            ") does not share the model/horizon/period grid of the first input");
    }
  }

  ComparisonTable t;
  std::map<std::string, std::size_t> column_index;
  std::vector<bool> column_koopman;
  std::set<std::size_t> horizons;
  for (const auto& m : inputs.front().models) {
    for (const auto& p : m.table.rows) {
      horizons.insert(p.plan.horizon);
      const std::string c = column_name(m, p);
      if (column_index.emplace(c, t.columns.size()).second) {
        t.columns.push_back(c);
        column_koopman.push_back(m.koopman);
      }
    }
  }
  for (const auto& in : inputs) {
    for (std::size_t h : horizons) {
      ComparisonTable::Row row;
      row.environment = in.environment;
      row.horizon = h;
      row.cells.assign(t.columns.size(), Cell{});
      for (const auto& m : in.models) {
        for (const auto& p : m.table.rows) {
          if (p.plan.horizon != h) continue;
          Cell& c = row.cells[column_index.at(column_name(m, p))];
          c.exploded = p.exploded;
          c.mse = p.mse;
        }
      }
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < row.cells.size(); ++c) {
        const Cell& cell = row.cells[c];
        if (!column_koopman[c] || !cell.mse || cell.exploded || !std::isfinite(*cell.mse)) continue;
        if (*cell.mse < best) {
          best = *cell.mse;
          row.best = static_cast<int>(c);
        }
      }
      t.rows.push_back(std::move(row));
    }
  }
  return t;
}

ComparisonTable compare_report(const std::vector<std::filesystem::path>& metrics_paths) {
  std::vector<ExperimentMetrics> inputs;
  for (const auto& p : metrics_paths) inputs.push_back(read_metrics(p));
  return compare_report(inputs);
}

std::string ComparisonTable::text() const {
  std::vector<std::vector<std::string>> grid;
  std::vector<std::string> header{"environment", "horizon"};
  header.insert(header.end(), columns.begin(), columns.end());
  grid.push_back(header);
  for (const auto& r : rows) {
    std::vector<std::string> line{r.environment, std::to_string(r.horizon)};
    for (std::size_t c = 0; c < r.cells.size(); ++c) {
      const Cell& cell = r.cells[c];
      std::string s = !cell.mse ? "-" : cell.exploded ? kCross : format_mse(*cell.mse);
      if (static_cast<int>(c) == r.best) s = "[" + s + "]";
      line.push_back(s);
    }
    grid.push_back(std::move(line));
  }
  // Width in code points so the cross marker aligns.
  auto width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char ch : s) w += (ch & 0xC0) != 0x80;
    return w;
  };
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& line : grid) {
    for (std::size_t c = 0; c < line.size(); ++c) widths[c] = std::max(widths[c], width(line[c]));
  }
  std::string out;
  for (const auto& line : grid) {
    for (std::size_t c = 0; c < line.size(); ++c) {
      out += line[c];
      if (c + 1 < line.size()) out += std::string(widths[c] - width(line[c]) + 2, ' ');
    }
    out += "\n";
  }
  return out;
}

std::string ComparisonTable::csv() const {
  std::string out = "environment,horizon";
  for (const auto& c : columns) out += "," + c;
  out += ",best\n";
  for (const auto& r : rows) {
    out += r.environment + "," + std::to_string(r.horizon);
    for (const auto& cell : r.cells) {
      out += ",";
      if (!cell.mse) continue;
      out += cell.exploded ? kCross : format_mse(*cell.mse);
    }
    out += ",";
    if (r.best >= 0) out += columns[static_cast<std::size_t>(r.best)];
    out += "\n";
  }
  return out;
}

}  // namespace koopman_lab::report
