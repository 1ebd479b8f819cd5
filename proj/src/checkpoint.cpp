#include "hetmt/checkpoint.hpp"

#include <bit>
#include <cstring>

#include <json.hpp>

#include "hetmt/errors.hpp"
#include "hetmt/io.hpp"

namespace hetmt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void append_tensors(const Params<float>& p, const std::string& section, std::vector<char>& payload,
                    json& table) {
  for (const auto& t : p.tensors) {
    table.push_back(json{{"section", section},
                         {"name", t.name},
                         {"shape", t.shape},
                         {"offset", payload.size()},
                         {"count", t.data.size()}});
    const std::size_t start = payload.size();
    payload.resize(start + 4 * t.data.size());
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(t.data[i]);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      std::memcpy(payload.data() + start + 4 * i, &bits, 4);
    }
  }
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& base_in) {
  const fs::path base = io::stem_path(base_in);
  std::vector<char> payload;
  json table = json::array();
  append_tensors(ckpt.params, "params", payload, table);
  if (ckpt.adam_m) append_tensors(*ckpt.adam_m, "adam_m", payload, table);
  if (ckpt.adam_v) append_tensors(*ckpt.adam_v, "adam_v", payload, table);
  json meta{{"format_version", kCheckpointFormatVersion},
            {"config", ckpt.config},
            {"iteration", ckpt.iteration},
            {"init_seed", ckpt.init_seed},
            {"payload_bytes", payload.size()},
            {"tensors", table}};
  io::write_bytes(fs::path(base).concat(".bin"), payload);
  io::write_text(fs::path(base).concat(".json"), meta.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& base_in) {
  const fs::path base = io::stem_path(base_in);
  const fs::path meta_path = fs::path(base).concat(".json");
  json meta;
  try {
    meta = json::parse(io::read_text(meta_path));
  } catch (const json::exception& e) {
    throw FormatError("bad checkpoint metadata " + meta_path.string() + ": " + e.what());
  }
  Checkpoint ckpt;
  const std::vector<char> payload = io::read_bytes(fs::path(base).concat(".bin"));
  try {
    const int version = meta.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion)
      throw FormatError("unsupported checkpoint format version " + std::to_string(version));
    ckpt.config = meta.at("config").get<ModelConfig>();
    ckpt.iteration = meta.at("iteration").get<std::int64_t>();
    ckpt.init_seed = meta.at("init_seed").get<std::uint64_t>();
    const Architecture arch = make_architecture(ckpt.config);

    Params<float> params, m, v;
    for (const auto& t : meta.at("tensors")) {
      ParamTensor<float> pt;
      pt.name = t.at("name").get<std::string>();
      pt.shape = t.at("shape").get<std::vector<int>>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto count = t.at("count").get<std::size_t>();
      if (offset + 4 * count > payload.size())
        throw FormatError("tensor " + pt.name + " runs past the end of " + base.string() + ".bin");
      pt.data.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, payload.data() + offset + 4 * i, 4);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        pt.data[i] = std::bit_cast<float>(bits);
      }
      const std::string section = t.at("section").get<std::string>();
      if (section == "params") params.tensors.push_back(std::move(pt));
      else if (section == "adam_m") m.tensors.push_back(std::move(pt));
      else if (section == "adam_v") v.tensors.push_back(std::move(pt));
      else throw FormatError("unknown checkpoint section " + section);
    }

    auto check = [&](const Params<float>& p, const char* what) {
      if (p.tensors.size() != arch.tensor_names.size())
        throw FormatError(std::string(what) + ": tensor count does not match the model config");
      for (std::size_t i = 0; i < p.tensors.size(); ++i) {
        std::size_t n = 1;
        for (int d : arch.tensor_shapes[i]) n *= static_cast<std::size_t>(d);
        if (p.tensors[i].name != arch.tensor_names[i] || p.tensors[i].shape != arch.tensor_shapes[i] ||
            p.tensors[i].data.size() != n)
          throw FormatError(std::string(what) + ": tensor " + p.tensors[i].name +
                            " disagrees with the model config");
      }
    };
    check(params, "params");
    ckpt.params = std::move(params);
    if (!m.tensors.empty()) {
      check(m, "adam_m");
      check(v, "adam_v");
      ckpt.adam_m = std::move(m);
      ckpt.adam_v = std::move(v);
    }
  } catch (const json::exception& e) {
    throw FormatError("bad checkpoint metadata " + meta_path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint " + meta_path.string() + " has an invalid config: " + e.what());
  }
  return ckpt;
}

}  // namespace hetmt
