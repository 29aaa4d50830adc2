#include "sdm/io/files.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "sdm/core/errors.hpp"

namespace sdm {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("error while reading '" + path + "'");
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::filesystem::path target(path);
  const std::filesystem::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(content.data(), std::streamsize(content.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("error while writing '" + path + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move output into place at '" + path + "'");
  }
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

namespace {

constexpr const char* kWeightsMagic = "sdm-weights 1";

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

std::string shape_text(const Shape& s) {
  std::string out;
  for (std::size_t k = 0; k < s.size(); ++k) out += (k ? "x" : "") + std::to_string(s[k]);
  return out.empty() ? "scalar" : out;
}

std::size_t parse_size(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty() || s[0] == '-') throw FormatError("weights: bad " + what + " '" + s + "'");
  return std::size_t(v);
}

Shape parse_shape(const std::string& s) {
  Shape out;
  if (s == "scalar") return out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, 'x')) out.push_back(parse_size(part, "shape"));
  return out;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string encode_weights(const ModelConfig& cfg, const ParamSet<float>& params) {
  std::string header = std::string(kWeightsMagic) + "\n";
  for (const auto& [k, v] : model_config_entries(cfg)) header += "config " + k + " " + v + "\n";
  std::string payload;
  for (const auto& [name, e] : params.entries()) {
    const std::size_t bytes = e.value.size() * 4;
    header += "tensor " + name + " f32 " + shape_text(e.value.shape()) + " " + std::to_string(payload.size()) + " " +
              std::to_string(bytes) + "\n";
    for (float f : e.value.data()) {
      const std::uint32_t u = to_le(std::bit_cast<std::uint32_t>(f));
      payload.append(reinterpret_cast<const char*>(&u), 4);
    }
  }
  header += "end\n";
  return header + payload;
}

WeightFile decode_weights(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw FormatError("weights: truncated manifest");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  if (next_line() != kWeightsMagic) throw FormatError("weights: missing 'sdm-weights 1' header");
  std::vector<std::pair<std::string, std::string>> config;
  struct Record {
    Shape shape;
    std::size_t offset, length;
  };
  std::map<std::string, Record> records;
  for (;;) {
    const std::string line = next_line();
    if (line == "end") break;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "config") {
      std::string key, value;
      ls >> key >> value;
      if (key.empty() || value.empty()) throw FormatError("weights: bad config line '" + line + "'");
      config.emplace_back(key, value);
    } else if (kind == "tensor") {
      std::string name, dtype, shape, offset, length, extra;
      ls >> name >> dtype >> shape >> offset >> length;
      if (length.empty() || (ls >> extra)) throw FormatError("weights: bad tensor line '" + line + "'");
      if (dtype != "f32") throw FormatError("weights: unsupported dtype '" + dtype + "' for " + name);
      Record r{parse_shape(shape), parse_size(offset, "offset"), parse_size(length, "length")};
      if (r.length != numel(r.shape) * 4) throw FormatError("weights: length of " + name + " does not match its shape");
      if (!records.emplace(name, r).second) throw FormatError("weights: duplicate tensor " + name);
    } else {
      throw FormatError("weights: unexpected manifest line '" + line + "'");
    }
  }
  const std::size_t payload_size = bytes.size() - pos;

  WeightFile wf;
  try {
    wf.config = model_config_from_entries(config);
  } catch (const UsageError& e) {
    throw FormatError(std::string("weights: invalid model configuration: ") + e.what());
  }
  const ParamSet<float> expected = init_model<float>(wf.config, 0, 0);
  for (const auto& [name, e] : expected.entries()) {
    auto it = records.find(name);
    if (it == records.end()) throw FormatError("weights: missing tensor " + name);
    if (it->second.shape != e.value.shape()) {
      throw FormatError("weights: tensor " + name + " has shape " + shape_text(it->second.shape) + ", expected " +
                        shape_text(e.value.shape()));
    }
  }
  for (const auto& [name, r] : records) {
    if (!expected.contains(name)) throw FormatError("weights: unexpected tensor " + name);
  }
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (const auto& [name, r] : records) {
    if (r.offset > payload_size || r.length > payload_size - r.offset) {
      throw FormatError("weights: tensor " + name + " lies outside the payload");
    }
    spans.emplace_back(r.offset, r.offset + r.length);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t k = 1; k < spans.size(); ++k) {
    if (spans[k].first < spans[k - 1].second) throw FormatError("weights: overlapping tensors");
  }
  for (const auto& [name, r] : records) {
    Tensor<float> t(r.shape);
    const char* src = bytes.data() + pos + r.offset;
    for (std::size_t k = 0; k < t.size(); ++k) {
      std::uint32_t u;
      std::memcpy(&u, src + 4 * k, 4);
      t[k] = std::bit_cast<float>(to_le(u));
    }
    wf.params.add(name, std::move(t), expected.trainable(name));
  }
  wf.hash = fnv1a64(bytes);
  return wf;
}

void save_weights(const std::string& path, const ModelConfig& cfg, const ParamSet<float>& params) {
  write_file_atomic(path, encode_weights(cfg, params));
}

WeightFile load_weights(const std::string& path) {
  try {
    return decode_weights(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

std::string encode_match_dump(const MatchDump& d) {
  std::string s = "# sdm-matches schema=" + std::to_string(kMatchSchemaVersion) + "\n";
  s += "# image_a=" + std::to_string(d.image_a.w) + "x" + std::to_string(d.image_a.h) + "\n";
  s += "# image_b=" + std::to_string(d.image_b.w) + "x" + std::to_string(d.image_b.h) + "\n";
  s += "# mode=" + d.mode + "\n";
  s += "# model_hash=" + d.model_hash + "\n";
  s += "x_a,y_a,x_b,y_b,confidence\n";
  for (const auto& m : d.matches) {
    s += fmt_double(m.xa) + "," + fmt_double(m.ya) + "," + fmt_double(m.xb) + "," + fmt_double(m.yb) + "," +
         fmt_double(m.confidence) + "\n";
  }
  return s;
}

MatchDump decode_match_dump(const std::string& text) {
  MatchDump d;
  std::istringstream in(text);
  std::string line;
  bool header_seen = false;
  auto dims = [](const std::string& v) {
    const auto x = v.find('x');
    if (x == std::string::npos) throw FormatError("matches: bad dimensions '" + v + "'");
    return GridDims{parse_size(v.substr(0, x), "width"), parse_size(v.substr(x + 1), "height")};
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(2, eq - 2), value = line.substr(eq + 1);
      if (key == "sdm-matches schema" && value != std::to_string(kMatchSchemaVersion)) {
        throw FormatError("matches: unsupported schema " + value);
      }
      if (key == "image_a") d.image_a = dims(value);
      if (key == "image_b") d.image_b = dims(value);
      if (key == "mode") d.mode = value;
      if (key == "model_hash") d.model_hash = value;
      continue;
    }
    if (!header_seen) {
      if (line != "x_a,y_a,x_b,y_b,confidence") throw FormatError("matches: unexpected column header");
      header_seen = true;
      continue;
    }
    FineMatch m;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%lf", &m.xa, &m.ya, &m.xb, &m.yb, &m.confidence) != 5) {
      throw FormatError("matches: bad row '" + line + "'");
    }
    d.matches.push_back(m);
  }
  if (!header_seen) throw FormatError("matches: missing column header");
  return d;
}

std::string encode_loss_curve(const std::vector<LossRecord>& curve) {
  std::string s = "step,l_c,l_f1,l_f2,total\n";
  for (const auto& r : curve) {
    s += std::to_string(r.step) + "," + fmt_double(r.l_c) + "," + fmt_double(r.l_f1) + "," + fmt_double(r.l_f2) +
         "," + fmt_double(r.total) + "\n";
  }
  return s;
}

std::string encode_homography(const Mat3& h) {
  std::string s;
  char buf[40];
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", h(r, c));
      s += (c ? "," : "") + std::string(buf);
    }
    s += "\n";
  }
  return s;
}

Mat3 decode_homography(const std::string& text) {
  Mat3 h;
  std::istringstream in(text);
  std::string line;
  int r = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (r == 3) throw FormatError("homography: more than three rows");
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &h(r, 0), &h(r, 1), &h(r, 2)) != 3) {
      throw FormatError("homography: bad row '" + line + "'");
    }
    ++r;
  }
  if (r != 3) throw FormatError("homography: expected three rows");
  if (!h.allFinite()) throw FormatError("homography: non-finite entry");
  return h;
}

RgbImage render_matches(const Tensor<float>& image_a, const Tensor<float>& image_b,
                        const std::vector<FineMatch>& matches) {
  const std::size_t ha = image_a.dim(1), wa = image_a.dim(2), hb = image_b.dim(1), wb = image_b.dim(2);
  RgbImage out(wa + wb, std::max(ha, hb));
  auto blit = [&](const Tensor<float>& img, std::size_t x0) {
    for (std::size_t y = 0; y < img.dim(1); ++y) {
      for (std::size_t x = 0; x < img.dim(2); ++x) {
        const auto v = std::uint8_t(std::lround(std::clamp(double(img.at(0, y, x)), 0.0, 1.0) * 255));
        out.set(long(x0 + x), long(y), v, v, v);
      }
    }
  };
  blit(image_a, 0);
  blit(image_b, wa);
  double top = 0;
  for (const auto& m : matches) top = std::max(top, m.confidence);
  for (const auto& m : matches) {
    const double c = top > 0 ? std::clamp(m.confidence / top, 0.0, 1.0) : 1.0;
    const auto r = std::uint8_t(std::lround(255 * (1 - c))), g = std::uint8_t(std::lround(255 * c));
    long x0 = std::lround(m.xa), y0 = std::lround(m.ya);
    const long x1 = std::lround(m.xb) + long(wa), y1 = std::lround(m.yb);
    const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0), sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    long err = dx + dy;
    for (;;) {
      out.set(x0, y0, r, g, 0);
      if (x0 == x1 && y0 == y1) break;
      const long e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
  return out;
}

}  // namespace sdm
