#include "refseg/train/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "refseg/data/vocab.hpp"
#include "refseg/util/hash.hpp"

namespace refseg::train {

std::size_t RunConfig::warmup_epochs_resolved() const {
  if (optimizer.warmup_epochs >= 0)
    return std::size_t(optimizer.warmup_epochs);
  return std::size_t(std::llround(0.1 * double(optimizer.epochs)));
}

data::GenConfig RunConfig::gen_config() const {
  data::GenConfig g;
  g.n = dataset.n;
  g.seed = dataset.seed;
  g.resolution = dataset.resolution;
  g.max_text_len = model.max_text_len;
  return g;
}

void RunConfig::validate() const {
  model.validate();
  distill.validate();
  if (!(optimizer.lr > 0.0) || !std::isfinite(optimizer.lr))
    throw std::invalid_argument("config: optimizer.lr must be positive");
  if (optimizer.weight_decay < 0.0 || !std::isfinite(optimizer.weight_decay))
    throw std::invalid_argument(
        "config: optimizer.weight_decay must be non-negative");
  if (optimizer.batch_size == 0)
    throw std::invalid_argument("config: optimizer.batch_size must be positive");
  if (optimizer.warmup_epochs > std::int64_t(optimizer.epochs))
    throw std::invalid_argument(
        "config: optimizer.warmup_epochs cannot exceed optimizer.epochs");
  if (dataset.resolution != int(model.image_size))
    throw std::invalid_argument(
        "config: dataset.resolution must equal model.image_size");
  if (model.vocab_size < data::Vocabulary().size())
    throw std::invalid_argument(
        "config: model.vocab_size must cover the dataset vocabulary (" +
        std::to_string(data::Vocabulary().size()) + " entries)");
  gen_config().validate();
}

// ============================================================ serialization

namespace {

std::string fmt_double(double v) {
  char buf[40];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc())
    throw std::runtime_error("config: cannot format a double");
  return std::string(buf, end);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw std::invalid_argument("config: key '" + key +
                                "' needs a non-negative integer, got '" + v +
                                "'");
  return out;
}

std::int64_t parse_i64(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw std::invalid_argument("config: key '" + key +
                                "' needs an integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw std::invalid_argument("config: key '" + key +
                                "' needs a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("config: key '" + key +
                              "' needs true or false, got '" + v + "'");
}

std::string trim(std::string s) {
  const auto is_space = [](unsigned char c) { return std::isspace(c); };
  while (!s.empty() && is_space(s.front())) s.erase(s.begin());
  while (!s.empty() && is_space(s.back())) s.pop_back();
  return s;
}

}  // namespace

RunConfig parse_run_config(std::istream& in) {
  RunConfig cfg;
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
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": empty key or value");
    if (!seen.insert(key).second)
      throw std::invalid_argument("config: duplicate key '" + key + "'");

    if (key == "seed") cfg.seed = parse_u64(key, val);
    else if (key == "output_dir") cfg.output_dir = val;
    else if (key == "model.image_size") cfg.model.image_size = parse_u64(key, val);
    else if (key == "model.patch_size") cfg.model.patch_size = parse_u64(key, val);
    else if (key == "model.channels") cfg.model.channels = parse_u64(key, val);
    else if (key == "model.image_depth") cfg.model.image_depth = parse_u64(key, val);
    else if (key == "model.image_heads") cfg.model.image_heads = parse_u64(key, val);
    else if (key == "model.text_depth") cfg.model.text_depth = parse_u64(key, val);
    else if (key == "model.text_heads") cfg.model.text_heads = parse_u64(key, val);
    else if (key == "model.decoder_depth") cfg.model.decoder_depth = parse_u64(key, val);
    else if (key == "model.decoder_heads") cfg.model.decoder_heads = parse_u64(key, val);
    else if (key == "model.neck_hidden") cfg.model.neck_hidden = parse_u64(key, val);
    else if (key == "model.vocab_size") cfg.model.vocab_size = parse_u64(key, val);
    else if (key == "model.max_text_len") cfg.model.max_text_len = parse_u64(key, val);
    else if (key == "lmvsd.enabled") cfg.distill.lmvsd.enabled = parse_bool(key, val);
    else if (key == "lmvsd.alpha") cfg.distill.lmvsd.alpha = parse_double(key, val);
    else if (key == "lmvsd.topk") cfg.distill.lmvsd.topk = parse_double(key, val);
    else if (key == "lmvsd.lambda") cfg.distill.lmvsd.lambda = parse_double(key, val);
    else if (key == "vmlsd.enabled") cfg.distill.vmlsd.enabled = parse_bool(key, val);
    else if (key == "vmlsd.alpha") cfg.distill.vmlsd.alpha = parse_double(key, val);
    else if (key == "vmlsd.topk") cfg.distill.vmlsd.topk = parse_double(key, val);
    else if (key == "vmlsd.lambda") cfg.distill.vmlsd.lambda = parse_double(key, val);
    else if (key == "supervision") {
      if (val == "distillation")
        cfg.distill.supervision = distill::Supervision::distillation;
      else if (val == "ground_truth")
        cfg.distill.supervision = distill::Supervision::ground_truth;
      else
        throw std::invalid_argument(
            "config: supervision must be distillation or ground_truth, got '" +
            val + "'");
    } else if (key == "share_weights") cfg.distill.share_weights = parse_bool(key, val);
    else if (key == "optimizer.lr") cfg.optimizer.lr = parse_double(key, val);
    else if (key == "optimizer.weight_decay") cfg.optimizer.weight_decay = parse_double(key, val);
    else if (key == "optimizer.batch_size") cfg.optimizer.batch_size = parse_u64(key, val);
    else if (key == "optimizer.epochs") cfg.optimizer.epochs = parse_u64(key, val);
    else if (key == "optimizer.warmup_epochs") cfg.optimizer.warmup_epochs = parse_i64(key, val);
    else if (key == "dataset.n") cfg.dataset.n = parse_u64(key, val);
    else if (key == "dataset.seed") cfg.dataset.seed = parse_u64(key, val);
    else if (key == "dataset.resolution") cfg.dataset.resolution = int(parse_u64(key, val));
    else
      throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

RunConfig parse_run_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw std::runtime_error("config: cannot open " + path.string());
  return parse_run_config(in);
}

RunConfig parse_run_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_run_config(in);
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::ostringstream out;
  out << "seed = " << cfg.seed << '\n';
  out << "output_dir = " << cfg.output_dir << '\n';
  out << "model.image_size = " << cfg.model.image_size << '\n';
  out << "model.patch_size = " << cfg.model.patch_size << '\n';
  out << "model.channels = " << cfg.model.channels << '\n';
  out << "model.image_depth = " << cfg.model.image_depth << '\n';
  out << "model.image_heads = " << cfg.model.image_heads << '\n';
  out << "model.text_depth = " << cfg.model.text_depth << '\n';
  out << "model.text_heads = " << cfg.model.text_heads << '\n';
  out << "model.decoder_depth = " << cfg.model.decoder_depth << '\n';
  out << "model.decoder_heads = " << cfg.model.decoder_heads << '\n';
  out << "model.neck_hidden = " << cfg.model.neck_hidden << '\n';
  out << "model.vocab_size = " << cfg.model.vocab_size << '\n';
  out << "model.max_text_len = " << cfg.model.max_text_len << '\n';
  out << "lmvsd.enabled = " << (cfg.distill.lmvsd.enabled ? "true" : "false") << '\n';
  out << "lmvsd.alpha = " << fmt_double(cfg.distill.lmvsd.alpha) << '\n';
  out << "lmvsd.topk = " << fmt_double(cfg.distill.lmvsd.topk) << '\n';
  out << "lmvsd.lambda = " << fmt_double(cfg.distill.lmvsd.lambda) << '\n';
  out << "vmlsd.enabled = " << (cfg.distill.vmlsd.enabled ? "true" : "false") << '\n';
  out << "vmlsd.alpha = " << fmt_double(cfg.distill.vmlsd.alpha) << '\n';
  out << "vmlsd.topk = " << fmt_double(cfg.distill.vmlsd.topk) << '\n';
  out << "vmlsd.lambda = " << fmt_double(cfg.distill.vmlsd.lambda) << '\n';
  out << "supervision = "
      << (cfg.distill.supervision == distill::Supervision::distillation
              ? "distillation"
              : "ground_truth")
      << '\n';
  out << "share_weights = " << (cfg.distill.share_weights ? "true" : "false") << '\n';
  out << "optimizer.lr = " << fmt_double(cfg.optimizer.lr) << '\n';
  out << "optimizer.weight_decay = " << fmt_double(cfg.optimizer.weight_decay) << '\n';
  out << "optimizer.batch_size = " << cfg.optimizer.batch_size << '\n';
  out << "optimizer.epochs = " << cfg.optimizer.epochs << '\n';
  out << "optimizer.warmup_epochs = " << cfg.optimizer.warmup_epochs << '\n';
  out << "dataset.n = " << cfg.dataset.n << '\n';
  out << "dataset.seed = " << cfg.dataset.seed << '\n';
  out << "dataset.resolution = " << cfg.dataset.resolution << '\n';
  return out.str();
}

std::uint64_t config_hash(const RunConfig& cfg) {
  return util::fnv1a64(serialize_run_config(cfg));
}

}  // namespace refseg::train
