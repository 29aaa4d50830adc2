#include "sdm/pipeline/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace sdm {

ModelConfig ModelConfig::standard() {
  ModelConfig c;
  c.transform.d_model = c.backbone.coarse_dim();
  return c;
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.backbone.widths = {8, 8, 16, 32};
  c.transform.d_model = 32;
  c.transform.n_layers = 2;
  c.fine.d_fine = 16;
  return c;
}

void ModelConfig::validate() const {
  backbone.validate();
  transform.validate();
  if (transform.d_model != backbone.coarse_dim()) throw UsageError("d_model must equal the last backbone width");
  if (fine.d_fine == 0) throw UsageError("d_fine must be positive");
  if (fine.patch_width == 0 || fine.patch_width % 2) throw UsageError("patch_width must be even and positive");
  if (!(coarse_inv_temperature > 0) || !(fine.inv_temperature > 0)) {
    throw UsageError("inverse temperatures must be positive");
  }
}

void TrainConfig::validate() const {
  if (alpha < 0 || beta < 0) throw UsageError("loss weights must be nonnegative");
  if (lr < 0 || weight_decay < 0) throw UsageError("lr and weight_decay must be nonnegative");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1) || !(adam_eps > 0)) {
    throw UsageError("invalid adaptive-moment parameters");
  }
  if (max_fine_matches == 0) throw UsageError("max_fine_matches must be positive");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "': '" + v + "' is not a number");
  }
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw UsageError("config key '" + key + "': '" + v + "' is not a nonnegative integer");
  }
  return out;
}

std::vector<std::size_t> to_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_uint(key, trim(item)));
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

void apply(RunConfig& rc, const std::string& key, const std::string& v, double& width_scale) {
  ModelConfig& m = rc.model;
  TrainConfig& t = rc.train;
  if (key == "widths") m.backbone.widths = to_list(key, v);
  else if (key == "blocks") m.backbone.blocks = to_list(key, v);
  else if (key == "strides") m.backbone.strides = to_list(key, v);
  else if (key == "width_scale") width_scale = to_double(key, v);
  else if (key == "n_layers") m.transform.n_layers = to_uint(key, v);
  else if (key == "agg_range") m.transform.agg_range = to_uint(key, v);
  else if (key == "heads") m.transform.heads = to_uint(key, v);
  else if (key == "ffn_expansion") m.transform.ffn_expansion = to_uint(key, v);
  else if (key == "d_fine") m.fine.d_fine = to_uint(key, v);
  else if (key == "patch_width") m.fine.patch_width = to_uint(key, v);
  else if (key == "inv_temperature") m.coarse_inv_temperature = to_double(key, v);
  else if (key == "fine_inv_temperature") m.fine.inv_temperature = to_double(key, v);
  else if (key == "tau") m.tau = to_double(key, v);
  else if (key == "alpha") t.alpha = to_double(key, v);
  else if (key == "beta") t.beta = to_double(key, v);
  else if (key == "lr") t.lr = to_double(key, v);
  else if (key == "weight_decay") t.weight_decay = to_double(key, v);
  else if (key == "adam_beta1") t.adam_beta1 = to_double(key, v);
  else if (key == "adam_beta2") t.adam_beta2 = to_double(key, v);
  else if (key == "adam_eps") t.adam_eps = to_double(key, v);
  else if (key == "steps") t.steps = to_uint(key, v);
  else if (key == "max_fine_matches") t.max_fine_matches = to_uint(key, v);
  else if (key == "seed") t.seed = to_uint(key, v);
  else if (key == "calibration_images") t.calibration_images = to_uint(key, v);
  else throw UsageError("unknown config key '" + key + "'");
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  RunConfig rc;
  while (std::getline(ss, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw UsageError("config line " + std::to_string(lineno) + ": empty key or value");
    if (key == "preset") {
      if (value == "toy") rc.model = ModelConfig::toy();
      else if (value == "standard") rc.model = ModelConfig::standard();
      else throw UsageError("unknown preset '" + value + "'");
      continue;
    }
    kv.emplace_back(key, value);
  }
  double width_scale = 1.0;
  for (const auto& [k, v] : kv) apply(rc, k, v, width_scale);
  if (width_scale != 1.0) rc.model.backbone = rc.model.backbone.scaled(width_scale);
  rc.model.transform.d_model = rc.model.backbone.coarse_dim();
  rc.model.validate();
  rc.train.validate();
  return rc;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::vector<std::pair<std::string, std::string>> model_config_entries(const ModelConfig& m) {
  return {{"widths", join(m.backbone.widths)},
          {"blocks", join(m.backbone.blocks)},
          {"strides", join(m.backbone.strides)},
          {"n_layers", std::to_string(m.transform.n_layers)},
          {"agg_range", std::to_string(m.transform.agg_range)},
          {"heads", std::to_string(m.transform.head_count())},
          {"ffn_expansion", std::to_string(m.transform.ffn_expansion)},
          {"d_fine", std::to_string(m.fine.d_fine)},
          {"patch_width", std::to_string(m.fine.patch_width)},
          {"inv_temperature", fmt(m.coarse_inv_temperature)},
          {"fine_inv_temperature", fmt(m.fine.inv_temperature)},
          {"tau", fmt(m.tau)}};
}

ModelConfig model_config_from_entries(const std::vector<std::pair<std::string, std::string>>& entries) {
  std::string text;
  for (const auto& [k, v] : entries) text += k + " = " + v + "\n";
  return parse_config(text).model;
}

std::string format_config(const RunConfig& rc) {
  std::string s;
  for (const auto& [k, v] : model_config_entries(rc.model)) s += k + " = " + v + "\n";
  const TrainConfig& t = rc.train;
  s += "alpha = " + fmt(t.alpha) + "\nbeta = " + fmt(t.beta) + "\nlr = " + fmt(t.lr) +
       "\nweight_decay = " + fmt(t.weight_decay) + "\nadam_beta1 = " + fmt(t.adam_beta1) +
       "\nadam_beta2 = " + fmt(t.adam_beta2) + "\nadam_eps = " + fmt(t.adam_eps) +
       "\nsteps = " + std::to_string(t.steps) + "\nmax_fine_matches = " + std::to_string(t.max_fine_matches) +
       "\nseed = " + std::to_string(t.seed) + "\ncalibration_images = " + std::to_string(t.calibration_images) + "\n";
  return s;
}

}  // namespace sdm
