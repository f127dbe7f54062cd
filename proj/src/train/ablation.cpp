#include "refseg/train/ablation.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <tuple>

#include <json.hpp>

#include "refseg/distill/distill.hpp"
#include "refseg/eval/metrics.hpp"
#include "refseg/train/svg.hpp"
#include "refseg/train/trainer.hpp"

namespace refseg::train {
namespace {

std::string trim(std::string s) {
  const auto is_space = [](unsigned char c) { return std::isspace(c); };
  while (!s.empty() && is_space(s.front())) s.erase(s.begin());
  while (!s.empty() && is_space(s.back())) s.pop_back();
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}

void upsert(std::vector<std::pair<std::string, std::string>>& kv,
            const std::string& key, const std::string& value) {
  for (auto& [k, v] : kv)
    if (k == key) {
      v = value;
      return;
    }
  kv.emplace_back(key, value);
}

// The seed the repeats count from: an explicit base override, else the
// run-config default.
std::uint64_t grid_base_seed(const GridSpec& grid) {
  std::uint64_t seed = RunConfig{}.seed;
  for (const auto& [k, v] : grid.base)
    if (k == "seed") {
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), seed);
      if (ec != std::errc() || p != v.data() + v.size())
        throw std::invalid_argument("grid: base.seed needs an integer, got '" +
                                    v + "'");
    }
  return seed;
}

RunConfig cell_config(const GridSpec& grid,
                      const std::vector<std::pair<std::string, std::string>>&
                          assignments,
                      std::uint64_t seed) {
  auto kv = grid.base;
  for (const auto& [k, v] : assignments) upsert(kv, k, v);
  upsert(kv, "seed", std::to_string(seed));
  std::string text;
  for (const auto& [k, v] : kv) text += k + " = " + v + "\n";
  return parse_run_config_text(text);
}

std::string cell_dir_name(std::size_t index, const std::string& label) {
  std::string out = "cell" + std::to_string(index) + "_";
  for (char c : label)
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' ||
            c == '=' || c == '-' || c == '+')
               ? c
               : '_';
  return out;
}

std::string sanitize_key(const std::string& key) {
  std::string out;
  for (char c : key)
    out += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
  return out;
}

bool all_numeric(const std::vector<std::string>& values,
                 std::vector<double>* parsed = nullptr) {
  for (const auto& v : values) {
    double d = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), d);
    if (ec != std::errc() || p != v.data() + v.size()) return false;
    if (parsed) parsed->push_back(d);
  }
  return true;
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / double(v.size());
}

// Label of a cell restricted to every axis except `skip`; "all" when the
// grid has a single axis.
std::string other_axes_label(const CellResult& cell, const std::string& skip) {
  std::string out;
  for (const auto& [k, v] : cell.assignments) {
    if (k == skip) continue;
    if (!out.empty()) out += ",";
    out += k + "=" + v;
  }
  return out.empty() ? "all" : out;
}

void write_text_file(const std::filesystem::path& path, const std::string& s) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << s;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_grid_reports(const AblationResult& res,
                        const std::filesystem::path& out_dir) {
  // one row per cell
  std::string csv = "cell,seeds,miou_mean,miou_min,miou_max,parameter_count\n";
  for (const auto& c : res.cells) {
    char row[160];
    std::snprintf(row, sizeof(row), "%zu,%.6f,%.6f,%.6f,%zu",
                  c.final_miou.size(), c.mean_miou(), c.min_miou(),
                  c.max_miou(), c.parameter_count);
    csv += "\"" + c.label + "\"," + row + "\n";
  }
  write_text_file(out_dir / "metrics.csv", csv);

  nlohmann::json meta;
  meta["name"] = res.grid.name;
  meta["seeds"] = res.grid.seeds;
  meta["base_seed"] = res.base_seed;
  meta["seed_policy"] =
      "each cell is repeated `seeds` times with run seed = base_seed + repeat "
      "index; dataset settings are shared across cells, so paired repeats see "
      "identical data and reported numbers are means over the repeats";
  meta["base"] = nlohmann::json::object();
  for (const auto& [k, v] : res.grid.base) meta["base"][k] = v;
  meta["axes"] = nlohmann::json::array();
  for (const auto& ax : res.grid.axes)
    meta["axes"].push_back({{"key", ax.key}, {"values", ax.values}});
  meta["cells"] = nlohmann::json::array();
  for (std::size_t i = 0; i < res.cells.size(); ++i) {
    const auto& c = res.cells[i];
    meta["cells"].push_back({{"label", c.label},
                             {"dir", cell_dir_name(i, c.label)},
                             {"final_miou", c.final_miou},
                             {"miou_mean", c.mean_miou()},
                             {"parameter_count", c.parameter_count}});
  }
  write_text_file(out_dir / "grid_meta.json", meta.dump(2) + "\n");

  std::vector<std::string> labels;
  std::vector<double> means;
  for (const auto& c : res.cells) {
    labels.push_back(c.label);
    means.push_back(c.mean_miou());
  }
  write_text_file(out_dir / "report.svg",
                  bar_chart_svg(res.grid.name + ": mean val mIoU over " +
                                    std::to_string(res.grid.seeds) + " seed(s)",
                                labels, means));

  // one chart per axis that actually varies
  for (const auto& ax : res.grid.axes) {
    if (ax.values.size() < 2) continue;
    const std::string file = "axis_" + sanitize_key(ax.key) + ".svg";
    std::vector<double> numeric;
    if (all_numeric(ax.values, &numeric)) {
      // one series per combination of the other axes
      std::vector<Series> series;
      for (const auto& c : res.cells) {
        const std::string group = other_axes_label(c, ax.key);
        auto it = std::find_if(series.begin(), series.end(),
                               [&](const Series& s) { return s.label == group; });
        if (it == series.end()) {
          series.push_back({group, {}, {}});
          it = std::prev(series.end());
        }
        const auto* v = [&]() -> const std::string* {
          for (const auto& [k, val] : c.assignments)
            if (k == ax.key) return &val;
          return nullptr;
        }();
        if (!v) continue;
        double x = 0;
        std::from_chars(v->data(), v->data() + v->size(), x);
        it->x.push_back(x);
        it->y.push_back(c.mean_miou());
      }
      for (auto& s : series) {
        std::vector<std::size_t> order(s.x.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(),
                  [&](std::size_t a, std::size_t b) { return s.x[a] < s.x[b]; });
        Series sorted{s.label, {}, {}};
        for (std::size_t i : order) {
          sorted.x.push_back(s.x[i]);
          sorted.y.push_back(s.y[i]);
        }
        s = std::move(sorted);
      }
      write_text_file(out_dir / file,
                      line_chart_svg(res.grid.name + ": " + ax.key, series));
    } else {
      // mean over every run sharing the axis value
      std::vector<std::string> vlabels;
      std::vector<double> vmeans;
      for (const auto& value : ax.values) {
        std::vector<double> pool;
        for (const auto& c : res.cells)
          for (const auto& [k, v] : c.assignments)
            if (k == ax.key && v == value)
              pool.insert(pool.end(), c.final_miou.begin(),
                          c.final_miou.end());
        vlabels.push_back(value);
        vmeans.push_back(mean_of(pool));
      }
      write_text_file(out_dir / file,
                      bar_chart_svg(res.grid.name + ": " + ax.key, vlabels,
                                    vmeans));
    }
  }
}

}  // namespace

double CellResult::mean_miou() const { return mean_of(final_miou); }

double CellResult::min_miou() const {
  return final_miou.empty()
             ? 0.0
             : *std::min_element(final_miou.begin(), final_miou.end());
}

double CellResult::max_miou() const {
  return final_miou.empty()
             ? 0.0
             : *std::max_element(final_miou.begin(), final_miou.end());
}

void GridSpec::validate() const {
  if (seeds == 0) throw std::invalid_argument("grid: seeds must be >= 1");
  std::set<std::string> axis_keys;
  for (const auto& ax : axes) {
    if (ax.key.empty()) throw std::invalid_argument("grid: empty axis key");
    if (ax.key == "seed" || ax.key == "output_dir")
      throw std::invalid_argument("grid: '" + ax.key + "' cannot be an axis");
    if (!axis_keys.insert(ax.key).second)
      throw std::invalid_argument("grid: duplicate axis '" + ax.key + "'");
    if (ax.values.empty())
      throw std::invalid_argument("grid: axis '" + ax.key + "' has no values");
    std::set<std::string> vals(ax.values.begin(), ax.values.end());
    if (vals.size() != ax.values.size())
      throw std::invalid_argument("grid: axis '" + ax.key +
                                  "' repeats a value");
  }
}

GridSpec parse_grid(std::istream& in) {
  GridSpec grid;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos)
      line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("grid line " + std::to_string(line_no) +
                                  ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw std::invalid_argument("grid line " + std::to_string(line_no) +
                                  ": empty key or value");
    if (!seen.insert(key).second)
      throw std::invalid_argument("grid: duplicate key '" + key + "'");

    if (key == "name") {
      grid.name = val;
    } else if (key == "seeds") {
      std::size_t s = 0;
      auto [p, ec] = std::from_chars(val.data(), val.data() + val.size(), s);
      if (ec != std::errc() || p != val.data() + val.size())
        throw std::invalid_argument("grid: seeds needs an integer, got '" +
                                    val + "'");
      grid.seeds = s;
    } else if (key.starts_with("base.")) {
      grid.base.emplace_back(key.substr(5), val);
    } else if (key.starts_with("axis.")) {
      grid.axes.push_back({key.substr(5), split_list(val)});
    } else {
      throw std::invalid_argument("grid: unknown key '" + key + "'");
    }
  }
  grid.validate();
  return grid;
}

GridSpec parse_grid_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("grid: cannot open " + path.string());
  return parse_grid(in);
}

GridSpec parse_grid_text(const std::string& text) {
  std::istringstream in(text);
  return parse_grid(in);
}

std::vector<CellResult> expand_grid(const GridSpec& grid) {
  grid.validate();
  const std::uint64_t base_seed = grid_base_seed(grid);
  std::size_t count = 1;
  for (const auto& ax : grid.axes) count *= ax.values.size();

  std::vector<CellResult> cells;
  cells.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    CellResult cell;
    // odometer order: last axis fastest
    std::size_t rem = i;
    std::vector<std::size_t> pick(grid.axes.size(), 0);
    for (std::size_t a = grid.axes.size(); a-- > 0;) {
      pick[a] = rem % grid.axes[a].values.size();
      rem /= grid.axes[a].values.size();
    }
    for (std::size_t a = 0; a < grid.axes.size(); ++a) {
      cell.assignments.emplace_back(grid.axes[a].key,
                                    grid.axes[a].values[pick[a]]);
      if (!cell.label.empty()) cell.label += ",";
      cell.label += grid.axes[a].key + "=" + grid.axes[a].values[pick[a]];
    }
    if (cell.label.empty()) cell.label = "base";
    try {
      cell.config = cell_config(grid, cell.assignments, base_seed);
    } catch (const std::exception& e) {
      throw std::invalid_argument("grid cell '" + cell.label +
                                  "': " + e.what());
    }
    cell.parameter_count =
        model::parameter_count(cell.config.model) +
        distill::added_parameter_count(cell.config.model, cell.config.distill);
    cells.push_back(std::move(cell));
  }
  return cells;
}

AblationResult run_ablation(const GridSpec& grid,
                            const std::filesystem::path& out_dir,
                            std::size_t parallel, bool verbose) {
  AblationResult res;
  res.grid = grid;
  res.base_seed = grid_base_seed(grid);
  res.cells = expand_grid(grid);
  std::filesystem::create_directories(out_dir);

  // one dataset per distinct (n, seed, resolution), shared across cells
  std::map<std::tuple<std::size_t, std::uint64_t, int>,
           std::shared_ptr<const data::Dataset>>
      cache;
  std::mutex cache_mutex;
  const auto dataset_for = [&](const RunConfig& cfg) {
    const auto key = std::make_tuple(cfg.dataset.n, cfg.dataset.seed,
                                     cfg.dataset.resolution);
    std::lock_guard<std::mutex> lock(cache_mutex);
    auto it = cache.find(key);
    if (it == cache.end())
      it = cache
               .emplace(key, std::make_shared<const data::Dataset>(
                                 data::generate_dataset(cfg.gen_config())))
               .first;
    return it->second;
  };

  std::mutex print_mutex;
  const auto run_cell = [&](std::size_t i) {
    CellResult& cell = res.cells[i];
    for (std::size_t r = 0; r < grid.seeds; ++r) {
      const RunConfig cfg =
          cell_config(grid, cell.assignments, res.base_seed + r);
      const auto ds = dataset_for(cfg);
      const auto dir = out_dir / cell_dir_name(i, cell.label) /
                       ("seed" + std::to_string(r));
      const TrainOutcome outcome = train_run(cfg, *ds, dir, false);
      if (outcome.epochs.empty())
        throw std::runtime_error("grid cell '" + cell.label +
                                 "': run produced no epochs");
      cell.final_miou.push_back(outcome.epochs.back().val.miou);
      if (verbose) {
        std::lock_guard<std::mutex> lock(print_mutex);
        std::printf("cell %zu/%zu  %-40s  seed %llu  val_miou %.4f\n", i + 1,
                    res.cells.size(), cell.label.c_str(),
                    static_cast<unsigned long long>(res.base_seed + r),
                    cell.final_miou.back());
        std::fflush(stdout);
      }
    }
  };

  if (parallel <= 1 || res.cells.size() <= 1) {
    for (std::size_t i = 0; i < res.cells.size(); ++i) run_cell(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    const std::size_t workers = std::min(parallel, res.cells.size());
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= res.cells.size()) return;
          try {
            run_cell(i);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  write_grid_reports(res, out_dir);
  return res;
}

}  // namespace refseg::train
