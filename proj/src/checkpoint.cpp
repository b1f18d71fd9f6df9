#include "aelab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "aelab/errors.hpp"
#include "json.hpp"

namespace aelab {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

using nlohmann::json;

constexpr char kMagic[4] = {'A', 'E', 'C', '1'};

json spec_json(const ModelSpec& spec) {
  const auto& d = spec.diffusion;
  return {{"family", family_name(spec.family)},
          {"channels", spec.channels},
          {"height", spec.height},
          {"width", spec.width},
          {"latent_dim", spec.latent_dim},
          {"hidden", spec.hidden},
          {"channel_chain", spec.channel_chain},
          {"init", init_scheme_name(spec.init)},
          {"diffusion",
           {{"timesteps", d.timesteps},
            {"beta_start", d.beta_start},
            {"beta_end", d.beta_end},
            {"denoiser_width", d.denoiser_width},
            {"extra_blocks", d.extra_blocks},
            {"time_features", d.time_features}}}};
}

template <typename V>
V field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw IoError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw IoError(where + ": field '" + key + "' has the wrong type");
  }
}

ModelSpec parse_spec(const json& j, const std::string& where) {
  ModelSpec spec;
  try {
    spec.family = parse_family(field<std::string>(j, "family", where));
  } catch (const ConfigError& e) {
    throw IoError(where + ": field 'family': " + e.what());
  }
  spec.channels = field<std::size_t>(j, "channels", where);
  spec.height = field<std::size_t>(j, "height", where);
  spec.width = field<std::size_t>(j, "width", where);
  spec.latent_dim = field<std::size_t>(j, "latent_dim", where);
  spec.hidden = field<std::vector<std::size_t>>(j, "hidden", where);
  spec.channel_chain = field<std::vector<std::size_t>>(j, "channel_chain", where);
  try {
    spec.init = parse_init_scheme(field<std::string>(j, "init", where));
  } catch (const ConfigError& e) {
    throw IoError(where + ": field 'init': " + e.what());
  }
  const auto d = field<json>(j, "diffusion", where);
  const std::string dw = where + ".diffusion";
  spec.diffusion.timesteps = field<int>(d, "timesteps", dw);
  spec.diffusion.beta_start = field<double>(d, "beta_start", dw);
  spec.diffusion.beta_end = field<double>(d, "beta_end", dw);
  spec.diffusion.denoiser_width = field<std::size_t>(d, "denoiser_width", dw);
  spec.diffusion.extra_blocks = field<std::size_t>(d, "extra_blocks", dw);
  spec.diffusion.time_features = field<std::size_t>(d, "time_features", dw);
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw IoError(where + ": invalid spec: " + e.what());
  }
  return spec;
}

}  // namespace

std::string spec_to_json(const ModelSpec& spec) { return spec_json(spec).dump(); }

ModelSpec spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("spec: malformed JSON: ") + e.what());
  }
  return parse_spec(j, "spec");
}

void save_checkpoint(const Autoencoder<float>& model, const CheckpointMeta& meta,
                     const std::filesystem::path& path) {
  const auto params = model.parameters();
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    manifest.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
    offset += p.tensor.numel() * sizeof(float);
  }
  const json header = {{"version", kCheckpointVersion},
                       {"spec", spec_json(model.spec())},
                       {"manifest", manifest},
                       {"metadata",
                        {{"epoch", meta.epoch},
                         {"train_loss", meta.train_loss},
                         {"seed", meta.seed}}}};
  const std::string text = header.dump();
  const auto length = static_cast<std::uint32_t>(text.size());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, 4);
  char len_bytes[4];
  std::memcpy(len_bytes, &length, 4);
  out.write(len_bytes, 4);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params) {
    const auto d = p.tensor.data();
    out.write(reinterpret_cast<const char*>(d.data()),
              static_cast<std::streamsize>(d.size() * sizeof(float)));
  }
  if (!out) throw IoError("failed writing " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string();
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IoError(where + ": bad magic, not an AEC1 checkpoint");
  }
  std::uint32_t length = 0;
  std::memcpy(&length, bytes.data() + 4, 4);
  if (bytes.size() < 8 + static_cast<std::size_t>(length)) {
    throw IoError(where + ": truncated header");
  }
  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + length);
  } catch (const json::parse_error& e) {
    throw IoError(where + ": malformed header JSON: " + e.what());
  }
  const auto version = field<std::uint32_t>(header, "version", where);
  if (version != kCheckpointVersion) {
    throw IoError(where + ": field 'version' is " + std::to_string(version) + ", expected " +
                  std::to_string(kCheckpointVersion));
  }
  const ModelSpec spec = parse_spec(field<json>(header, "spec", where), where + ": spec");
  LoadedCheckpoint loaded;
  switch (spec.family) {
    case ModelFamily::kFeedforward:
      loaded.model = std::make_unique<FeedforwardAutoencoder<float>>(spec);
      break;
    case ModelFamily::kConvolutional:
      loaded.model = std::make_unique<ConvolutionalAutoencoder<float>>(spec);
      break;
    case ModelFamily::kDiffusion:
      loaded.model = std::make_unique<DiffusionAutoencoder<float>>(spec);
      break;
  }

  const auto manifest = field<json>(header, "manifest", where);
  const auto params = loaded.model->parameters();
  if (!manifest.is_array() || manifest.size() != params.size()) {
    throw IoError(where + ": field 'manifest' lists " +
                  std::to_string(manifest.is_array() ? manifest.size() : 0) + " parameters, model has " +
                  std::to_string(params.size()));
  }
  const std::size_t data_start = 8 + length;
  const std::size_t data_size = bytes.size() - data_start;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = manifest[i];
    const auto name = field<std::string>(entry, "name", where + ": manifest[" + std::to_string(i) + "]");
    const std::string pw = where + ": parameter '" + name + "'";
    if (name != params[i].name) {
      throw IoError(pw + " does not match expected parameter '" + params[i].name + "'");
    }
    const auto shape = field<Shape>(entry, "shape", pw);
    if (shape != params[i].tensor.shape()) {
      throw IoError(pw + " has shape " + shape_str(shape) + ", architecture expects " +
                    shape_str(params[i].tensor.shape()));
    }
    const auto offset = field<std::uint64_t>(entry, "offset", pw);
    const std::size_t nbytes = params[i].tensor.numel() * sizeof(float);
    if (offset > data_size || data_size - offset < nbytes) {
      throw IoError(pw + ": data truncated (needs " + std::to_string(nbytes) + " bytes at offset " +
                    std::to_string(offset) + ")");
    }
    auto tensor = params[i].tensor;
    std::memcpy(tensor.mutable_data().data(), bytes.data() + data_start + offset, nbytes);
  }

  const auto meta = field<json>(header, "metadata", where);
  loaded.meta.epoch = field<int>(meta, "epoch", where + ": metadata");
  loaded.meta.train_loss = field<double>(meta, "train_loss", where + ": metadata");
  loaded.meta.seed = field<std::uint64_t>(meta, "seed", where + ": metadata");
  return loaded;
}

}  // namespace aelab
