#pragma once

// SAE and ensemble checkpoints.
//
// SAE file layout:
//   "SAEC" | u32 version=1 | u64 header_bytes | JSON header (space padded to 8) | f64 blocks
// Header "sections" give each block's byte offset from the start of the block
// area, its shape, and storage order (row-major). Blocks: w_enc, b_enc, w_dec,
// b_dec and, for JumpReLU, theta.
//
// An ensemble checkpoint is a directory holding manifest.json and one SAE file
// per member.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "saens/ensemble.hpp"

namespace saens {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr char kCheckpointMagic[4] = {'S', 'A', 'E', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline json activation_to_json(const Activation& a) {
  json j{{"kind", to_string(a.kind)}};
  if (a.kind == ActivationKind::topk) j["K"] = a.topk;
  if (a.kind == ActivationKind::jumprelu) j["bandwidth"] = a.bandwidth;
  return j;
}

inline json train_config_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"adam_beta1", c.adam_beta1},   {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},           {"batch_size", c.batch_size},   {"epochs", c.epochs},
          {"seed", c.seed},                   {"lambda", c.lambda},           {"warmup_fraction", c.warmup_fraction},
          {"log_interval", c.log_interval},   {"shuffle", c.shuffle}};
}

namespace detail {

template <typename M>
void write_block(std::string& out, const M& m) {
  // row-major f64
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      char bytes[8];
      std::memcpy(bytes, &v, 8);
      out.append(bytes, 8);
    }
}

inline Matrix read_block(const std::string& data, const json& sec) {
  const auto off = sec.at("offset").get<std::size_t>();
  const auto rows = sec.at("rows").get<Index>();
  const auto cols = sec.at("cols").get<Index>();
  const std::size_t bytes = static_cast<std::size_t>(rows * cols) * 8;
  if (off + bytes > data.size()) throw IoError("checkpoint block out of bounds");
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) {
      double v;
      std::memcpy(&v, data.data() + off + static_cast<std::size_t>(r * cols + c) * 8, 8);
      m(r, c) = v;
    }
  return m;
}

}  // namespace detail

// `meta` is stored verbatim under "meta" (seeds, config echo, provenance).
inline void save_sae(const SaeParams& sae, const fs::path& path, const json& meta = json::object()) {
  sae.validate();
  std::string blocks;
  json sections = json::object();
  auto add = [&](const char* name, const auto& m) {
    sections[name] = {{"offset", blocks.size()}, {"rows", m.rows()}, {"cols", m.cols()}, {"order", "row-major"}};
    detail::write_block(blocks, m);
  };
  add("w_enc", sae.w_enc);
  add("b_enc", sae.b_enc);
  add("w_dec", sae.w_dec);
  add("b_dec", sae.b_dec);
  if (sae.activation.kind == ActivationKind::jumprelu) add("theta", sae.activation.theta);

  json header{{"format", "sae-checkpoint"},
              {"version", kCheckpointVersion},
              {"d", sae.dim()},
              {"k", sae.dict_size()},
              {"activation", activation_to_json(sae.activation)},
              {"lambda", sae.lambda},
              {"p", sae.p_norm()},
              {"sections", sections},
              {"meta", meta}};
  std::string text = header.dump();
  text.append((8 - text.size() % 8) % 8, ' ');

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create checkpoint " + path.string());
  out.write(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(blocks.data(), static_cast<std::streamsize>(blocks.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

struct LoadedSae {
  SaeParams params;
  json header;
};

inline LoadedSae load_sae(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw IoError("bad checkpoint magic in " + path.string());
  if (detail::get<std::uint32_t>(in) != kCheckpointVersion) throw IoError("unsupported checkpoint version");
  const auto header_bytes = detail::get<std::uint64_t>(in);
  std::string text(header_bytes, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_bytes));
  if (!in) throw IoError("truncated checkpoint header in " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  LoadedSae out;
  try {
    out.header = json::parse(text);
    const json& sec = out.header.at("sections");
    SaeParams& p = out.params;
    p.w_enc = detail::read_block(data, sec.at("w_enc"));
    p.b_enc = detail::read_block(data, sec.at("b_enc")).col(0);
    p.w_dec = detail::read_block(data, sec.at("w_dec"));
    p.b_dec = detail::read_block(data, sec.at("b_dec")).col(0);
    const json& act = out.header.at("activation");
    p.activation.kind = activation_kind_from_string(act.at("kind").get<std::string>());
    if (p.activation.kind == ActivationKind::topk) p.activation.topk = act.at("K").get<Index>();
    if (p.activation.kind == ActivationKind::jumprelu) {
      p.activation.bandwidth = act.at("bandwidth").get<double>();
      p.activation.theta = detail::read_block(data, sec.at("theta")).col(0);
    }
    p.lambda = out.header.at("lambda").get<double>();
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  out.params.validate();
  return out;
}

inline void save_ensemble(const Ensemble& e, const fs::path& dir, const json& meta = json::object()) {
  e.validate();
  fs::create_directories(dir);
  json manifest{{"format", "sae-ensemble"},
                {"version", 1},
                {"kind", to_string(e.kind)},
                {"J", e.size()},
                {"weights", e.weights},
                {"seeds", e.seeds},
                {"members", json::array()},
                {"meta", meta}};
  for (Index j = 0; j < e.size(); ++j) {
    char name[32];
    std::snprintf(name, sizeof(name), "member_%03ld.saec", static_cast<long>(j));
    json member_meta = meta;
    member_meta["member_index"] = j;
    if (static_cast<std::size_t>(j) < e.seeds.size()) member_meta["init_seed"] = e.seeds[static_cast<std::size_t>(j)];
    save_sae(e.members[static_cast<std::size_t>(j)], dir / name, member_meta);
    manifest["members"].push_back(name);
  }
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("failed writing ensemble manifest in " + dir.string());
}

inline Ensemble load_ensemble(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot open ensemble manifest in " + dir.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed ensemble manifest: ") + e.what());
  }
  Ensemble e;
  e.kind = ensemble_kind_from_string(manifest.at("kind").get<std::string>());
  e.weights = manifest.at("weights").get<std::vector<double>>();
  e.seeds = manifest.value("seeds", std::vector<std::uint64_t>{});
  for (const auto& name : manifest.at("members")) e.members.push_back(load_sae(dir / name.get<std::string>()).params);
  e.validate();
  return e;
}

// A checkpoint path is a single SAE file or an ensemble directory.
using Target = std::variant<SaeParams, Ensemble>;

inline Target load_target(const fs::path& path) {
  if (fs::is_directory(path)) return load_ensemble(path);
  return load_sae(path).params;
}

}  // namespace saens
