#include "vrwkv/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace vrwkv {
namespace {

using nlohmann::json;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error("checkpoint: truncated file");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw Error(std::string("checkpoint: ") + what + " exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::string to_string(WkvDirection direction) {
  return direction == WkvDirection::causal ? "causal" : "bidirectional";
}

WkvDirection parse_direction(std::string_view name) {
  if (name == "bidirectional") return WkvDirection::bidirectional;
  if (name == "causal") return WkvDirection::causal;
  throw Error("unknown attention direction '" + std::string(name) + "'");
}

std::string config_to_json(const ModelConfig& c) {
  json j = {{"embed_dim", c.embed_dim},
            {"hidden_dim", c.hidden_dim},
            {"depth", c.depth},
            {"patch_size", c.patch_size},
            {"num_classes", c.num_classes},
            {"image_channels", c.image_channels},
            {"image_size", c.image_size},
            {"extra_norm", c.extra_norm},
            {"layer_scale_init", c.layer_scale_init},
            {"shift_mode", to_string(c.shift_mode)},
            {"shift_residual_form", c.shift_residual_form},
            {"attention", to_string(c.attention)}};
  return j.dump();
}

ModelConfig config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(std::string("model config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error("model config: expected a JSON object");
  ModelConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "embed_dim") c.embed_dim = value.get<std::size_t>();
      else if (key == "hidden_dim") c.hidden_dim = value.get<std::size_t>();
      else if (key == "depth") c.depth = value.get<std::size_t>();
      else if (key == "patch_size") c.patch_size = value.get<std::size_t>();
      else if (key == "num_classes") c.num_classes = value.get<std::size_t>();
      else if (key == "image_channels") c.image_channels = value.get<std::size_t>();
      else if (key == "image_size") c.image_size = value.get<std::size_t>();
      else if (key == "extra_norm") c.extra_norm = value.get<bool>();
      else if (key == "layer_scale_init") c.layer_scale_init = value.get<double>();
      else if (key == "shift_mode") c.shift_mode = parse_shift_mode(value.get<std::string>());
      else if (key == "shift_residual_form") c.shift_residual_form = value.get<bool>();
      else if (key == "attention") c.attention = parse_direction(value.get<std::string>());
      else throw Error("model config: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw Error(std::string("model config: wrong value type: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename Real>
std::string encode_checkpoint(const ModelConfig& config, const ModelParams<Real>& params) {
  std::string out(kCheckpointMagic);
  put_u32(out, kCheckpointVersion);
  const std::string cfg = config_to_json(config);
  put_u32(out, checked_u32(cfg.size(), "config length"));
  out += cfg;
  visit_params(params, [&](const std::string& name, const Tensor<Real>& t, bool) {
    put_u32(out, checked_u32(name.size(), "name length"));
    out += name;
    put_u32(out, checked_u32(t.rank(), "rank"));
    for (auto d : t.shape()) put_u32(out, checked_u32(d, "dimension"));
    for (Real v : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  });
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(4) != kCheckpointMagic) throw Error("checkpoint: bad magic bytes");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion)
    throw Error("checkpoint: unsupported format version " + std::to_string(version));
  const std::uint32_t cfg_len = in.u32();
  Checkpoint ck{config_from_json(in.take(cfg_len)), {}};
  ck.params = init_params<float>(ck.config, 0);
  visit_params(ck.params, [&](const std::string& name, Tensor<float>& t, bool) {
    const std::uint32_t name_len = in.u32();
    if (in.take(name_len) != name)
      throw Error("checkpoint: expected tensor '" + name + "'");
    const std::uint32_t rank = in.u32();
    if (rank != t.rank()) throw Error("checkpoint: rank mismatch for '" + name + "'");
    for (std::size_t i = 0; i < rank; ++i)
      if (in.u32() != t.dim(i)) throw Error("checkpoint: shape mismatch for '" + name + "'");
    for (auto& v : t.values()) v = std::bit_cast<float>(in.u32());
  });
  if (!in.done()) throw Error("checkpoint: trailing bytes after last tensor");
  return ck;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + tmp.string() + "' for writing");
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!f) throw Error("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

template <typename Real>
void write_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                      const ModelParams<Real>& params) {
  write_file_atomic(path, encode_checkpoint(config, params));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

template std::string encode_checkpoint(const ModelConfig&, const ModelParams<float>&);
template std::string encode_checkpoint(const ModelConfig&, const ModelParams<double>&);
template void write_checkpoint(const std::filesystem::path&, const ModelConfig&,
                               const ModelParams<float>&);
template void write_checkpoint(const std::filesystem::path&, const ModelConfig&,
                               const ModelParams<double>&);

}  // namespace vrwkv
