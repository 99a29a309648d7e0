#include "fsrl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace fsrl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'F', 'S', 'R', 'L', 'C', 'K', 'P', '1'};
constexpr uint32_t kVersion = 1;

std::string hex64(uint64_t v) { return strprintf("%016llx", static_cast<unsigned long long>(v)); }

}  // namespace

void save_checkpoint(const std::string& path,
                     std::span<const std::pair<std::string, Tensor>> tensors,
                     const std::string& config_snapshot_json,
                     const std::map<std::string, std::string>& extra) {
  std::vector<float> payload;
  json manifest;
  manifest["format_version"] = kVersion;
  manifest["config"] = json::parse(config_snapshot_json);
  manifest["extra"] = extra;
  json tlist = json::array();
  int64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["dtype"] = "f32";
    entry["offset"] = offset;
    entry["count"] = t.numel();
    tlist.push_back(std::move(entry));
    for (double v : t.values()) payload.push_back(static_cast<float>(v));
    offset += t.numel();
  }
  manifest["tensors"] = std::move(tlist);
  manifest["payload_fnv1a64"] =
      hex64(fnv1a64(payload.data(), payload.size() * sizeof(float)));

  const std::string mtext = manifest.dump();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint for writing: " + path);
  f.write(kMagic, sizeof(kMagic));
  const uint32_t version = kVersion;
  const uint32_t mlen = static_cast<uint32_t>(mtext.size());
  f.write(reinterpret_cast<const char*>(&version), sizeof(version));
  f.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  f.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!f) throw IoError("failed writing checkpoint: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[8];
  uint32_t version = 0, mlen = 0;
  f.read(magic, sizeof(magic));
  f.read(reinterpret_cast<char*>(&version), sizeof(version));
  f.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("not a checkpoint file: " + path);
  if (version != kVersion)
    throw CheckpointError(strprintf("checkpoint %s has format version %u, expected %u",
                                    path.c_str(), version, kVersion));
  std::string mtext(mlen, '\0');
  f.read(mtext.data(), mlen);
  if (!f) throw CheckpointError("truncated checkpoint manifest: " + path);
  json manifest = json::parse(mtext, nullptr, false);
  if (manifest.is_discarded())
    throw CheckpointError("corrupt checkpoint manifest: " + path);

  LoadedCheckpoint out;
  int64_t total = 0;
  try {
    out.config_snapshot_json = manifest.at("config").dump();
    if (manifest.contains("extra"))
      out.extra = manifest.at("extra").get<std::map<std::string, std::string>>();
    for (const auto& entry : manifest.at("tensors")) {
      (void)entry.at("name");
      if (entry.at("dtype").get<std::string>() != "f32")
        throw CheckpointError("checkpoint: unsupported dtype");
      if (entry.at("offset").get<int64_t>() != total)
        throw CheckpointError("checkpoint: non-contiguous tensor offsets");
      total += entry.at("count").get<int64_t>();
    }
  } catch (const json::exception& e) {
    throw CheckpointError(strprintf("bad checkpoint manifest in %s: %s", path.c_str(),
                                    e.what()));
  }

  std::vector<float> payload(static_cast<size_t>(total));
  f.read(reinterpret_cast<char*>(payload.data()),
         static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!f || f.gcount() != static_cast<std::streamsize>(payload.size() * sizeof(float)))
    throw CheckpointError("truncated checkpoint payload: " + path);
  f.peek();
  if (!f.eof()) throw CheckpointError("trailing bytes after checkpoint payload: " + path);

  const std::string want = manifest.at("payload_fnv1a64").get<std::string>();
  const std::string got = hex64(fnv1a64(payload.data(), payload.size() * sizeof(float)));
  if (want != got)
    throw CheckpointError(strprintf("checkpoint payload hash mismatch in %s (%s != %s)",
                                    path.c_str(), got.c_str(), want.c_str()));

  for (const auto& entry : manifest.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    const int64_t offset = entry.at("offset").get<int64_t>();
    const int64_t count = entry.at("count").get<int64_t>();
    std::vector<double> vals(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i)
      vals[static_cast<size_t>(i)] =
          static_cast<double>(payload[static_cast<size_t>(offset + i)]);
    out.tensors.emplace_back(entry.at("name").get<std::string>(),
                             Tensor::from_values(std::move(shape), std::move(vals)));
  }
  return out;
}

namespace {

int64_t extra_int(const std::map<std::string, std::string>& extra, const std::string& key) {
  auto it = extra.find(key);
  if (it == extra.end()) throw CheckpointError("checkpoint missing extra field: " + key);
  return std::stoll(it->second);
}

std::string extra_str(const std::map<std::string, std::string>& extra,
                      const std::string& key) {
  auto it = extra.find(key);
  if (it == extra.end()) throw CheckpointError("checkpoint missing extra field: " + key);
  return it->second;
}

void check_kind(const LoadedCheckpoint& ck, const std::string& want,
                const std::string& path) {
  if (extra_str(ck.extra, "kind") != want)
    throw CheckpointError(strprintf("checkpoint %s is a '%s', expected '%s'", path.c_str(),
                                    extra_str(ck.extra, "kind").c_str(), want.c_str()));
}

// Copies loaded tensors into destination parameters by name, strict 1:1.
void fill_params(std::vector<std::pair<std::string, Tensor>> dst,
                 const LoadedCheckpoint& ck, const std::string& path) {
  if (dst.size() != ck.tensors.size())
    throw CheckpointError(strprintf("checkpoint %s has %zu tensors, expected %zu",
                                    path.c_str(), ck.tensors.size(), dst.size()));
  for (size_t i = 0; i < dst.size(); ++i) {
    auto& [want_name, param] = dst[i];
    const auto& [got_name, loaded] = ck.tensors[i];
    if (want_name != got_name)
      throw CheckpointError(strprintf("checkpoint %s tensor #%zu is '%s', expected '%s'",
                                      path.c_str(), i, got_name.c_str(), want_name.c_str()));
    if (loaded.shape() != param.shape())
      throw CheckpointError(strprintf("checkpoint %s tensor '%s' shape %s != %s",
                                      path.c_str(), got_name.c_str(),
                                      fmt_shape(loaded.shape()).c_str(),
                                      fmt_shape(param.shape()).c_str()));
    std::copy(loaded.values().begin(), loaded.values().end(), param.values().begin());
  }
}

}  // namespace

void save_lm(const std::string& path, const LM& lm, const std::string& config_snapshot_json) {
  std::map<std::string, std::string> extra = {
      {"kind", "lm"},
      {"vocab_size", std::to_string(lm.cfg.vocab_size)},
      {"d_model", std::to_string(lm.cfg.d_model)},
      {"n_layers", std::to_string(lm.cfg.n_layers)},
      {"n_heads", std::to_string(lm.cfg.n_heads)},
      {"d_mlp", std::to_string(lm.cfg.d_mlp)},
      {"context_len", std::to_string(lm.cfg.context_len)},
      {"hook_layer", std::to_string(lm.cfg.hook_layer)},
  };
  save_checkpoint(path, lm.named_params(), config_snapshot_json, extra);
}

LM load_lm(const std::string& path) {
  LoadedCheckpoint ck = load_checkpoint(path);
  check_kind(ck, "lm", path);
  LMConfig cfg;
  cfg.vocab_size = extra_int(ck.extra, "vocab_size");
  cfg.d_model = extra_int(ck.extra, "d_model");
  cfg.n_layers = extra_int(ck.extra, "n_layers");
  cfg.n_heads = extra_int(ck.extra, "n_heads");
  cfg.d_mlp = extra_int(ck.extra, "d_mlp");
  cfg.context_len = extra_int(ck.extra, "context_len");
  cfg.hook_layer = extra_int(ck.extra, "hook_layer");
  cfg.validate();
  Rng scratch(0);
  LM lm = LM::init(cfg, scratch);
  fill_params(lm.named_params(), ck, path);
  lm.freeze();
  return lm;
}

void save_sae(const std::string& path, const SparseAutoencoder& sae,
              const std::string& config_snapshot_json) {
  std::map<std::string, std::string> extra = {
      {"kind", "sae"},
      {"d", std::to_string(sae.d)},
      {"d_sae", std::to_string(sae.d_sae)},
  };
  save_checkpoint(path, sae.named_params(), config_snapshot_json, extra);
}

SparseAutoencoder load_sae(const std::string& path) {
  LoadedCheckpoint ck = load_checkpoint(path);
  check_kind(ck, "sae", path);
  const int64_t d = extra_int(ck.extra, "d");
  const int64_t d_sae = extra_int(ck.extra, "d_sae");
  Rng scratch(0);
  SparseAutoencoder sae = SparseAutoencoder::init(d, d_sae, scratch);
  fill_params(sae.named_params(), ck, path);
  sae.set_trainable(false);
  return sae;
}

void save_adapter(const std::string& path, const SteeringAdapter& adapter,
                  const std::string& config_snapshot_json) {
  std::map<std::string, std::string> extra = {
      {"kind", "adapter"},
      {"variant", variant_name(adapter.variant)},
      {"d", std::to_string(adapter.d)},
      {"d_sae", std::to_string(adapter.d_sae)},
  };
  save_checkpoint(path, adapter.named_params(), config_snapshot_json, extra);
}

SteeringAdapter load_adapter(const std::string& path) {
  LoadedCheckpoint ck = load_checkpoint(path);
  check_kind(ck, "adapter", path);
  const int64_t d = extra_int(ck.extra, "d");
  const int64_t d_sae = extra_int(ck.extra, "d_sae");
  const AdapterVariant variant = variant_from_name(extra_str(ck.extra, "variant"));
  Rng scratch(0);
  SteeringAdapter adapter = SteeringAdapter::init(d, d_sae, variant, scratch);
  fill_params(adapter.named_params(), ck, path);
  adapter.set_trainable(false);
  return adapter;
}

}  // namespace fsrl
