#include <bit>
#include <cstring>

#include "halomil/detectors.hpp"

namespace halomil {

namespace {

constexpr std::string_view kCheckpointMagic = "HMILCKPT";
constexpr int kCheckpointVersion = 1;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(std::span<const std::uint8_t> bytes, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[at + i]) << (8 * i);
  return v;
}

std::size_t hidden_dim_of(const Detector& det) {
  if (const auto* p = std::get_if<MaxPoolParams>(&det.params)) return p->feature_dim();
  if (const auto* p = std::get_if<HamiParams>(&det.params)) return p->hidden_dim();
  return std::get<AttentionParams>(det.params).attention_dim();
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Detector& detector, const nlohmann::json& extra) {
  detector.validate();
  nlohmann::json header;
  header["format"] = "halomil-checkpoint";
  header["version"] = kCheckpointVersion;
  header["architecture"] = to_string(detector.arch);
  header["input_dim"] = detector.input_dim();
  header["hidden_dim"] = hidden_dim_of(detector);
  if (const auto* p = std::get_if<HamiParams>(&detector.params)) {
    header["k_frac"] = p->k_frac;
    header["lambda"] = p->lambda;
    header["bn_eps"] = p->bn.eps;
  }
  std::size_t total = 0;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& block : stored_blocks(detector)) {
    tensors.push_back({{"name", block.name}, {"shape", block.shape}});
    total += block.values.size();
  }
  header["tensors"] = std::move(tensors);
  header["payload_doubles"] = total;
  if (!extra.is_null()) header["extra"] = extra;

  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + 8 * total);
  for (const auto& block : stored_blocks(detector)) {
    for (double v : block.values) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Detector decode_checkpoint(std::span<const std::uint8_t> bytes, nlohmann::json* header_out) {
  const std::size_t prefix = kCheckpointMagic.size() + 8;
  if (bytes.size() < prefix) throw FormatError("truncated checkpoint header", bytes.size());
  if (std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw FormatError("bad checkpoint magic", 0);
  }
  const auto header_len = get_u64(bytes, kCheckpointMagic.size());
  if (header_len > bytes.size() - prefix) {
    throw FormatError("checkpoint header length exceeds file size", kCheckpointMagic.size());
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + prefix, bytes.begin() + prefix + header_len);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what(), prefix);
  }

  Detector det;
  try {
    if (header.at("version").get<int>() != kCheckpointVersion) {
      throw FormatError("unsupported checkpoint version", prefix);
    }
    DetectorShape shape;
    shape.input_dim = header.at("input_dim").get<std::size_t>();
    shape.hidden_dim = header.at("hidden_dim").get<std::size_t>();
    shape.k_frac = header.value("k_frac", 0.1);
    shape.lambda = header.value("lambda", 0.0);
    std::mt19937_64 unused(0);
    det = zeros_like(init_detector(
        architecture_from_string(header.at("architecture").get<std::string>()), shape, unused));
    if (auto* p = std::get_if<HamiParams>(&det.params)) p->bn.eps = header.value("bn_eps", 1e-5);

    const auto& tensors = header.at("tensors");
    auto blocks = stored_blocks(det);
    if (tensors.size() != blocks.size()) {
      throw FormatError("checkpoint tensor list does not match architecture", prefix);
    }
    std::size_t total = 0;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      if (tensors[i].at("name").get<std::string>() != blocks[i].name ||
          tensors[i].at("shape").get<std::vector<std::size_t>>() != blocks[i].shape) {
        throw FormatError("checkpoint tensor '" + blocks[i].name + "' has unexpected name or shape",
                          prefix);
      }
      total += blocks[i].values.size();
    }
    if (header.at("payload_doubles").get<std::size_t>() != total) {
      throw FormatError("checkpoint payload_doubles disagrees with tensor shapes", prefix);
    }
    const std::size_t payload_at = prefix + header_len;
    if (bytes.size() - payload_at != 8 * total) {
      throw FormatError("checkpoint payload is " + std::to_string(bytes.size() - payload_at) +
                            " bytes, header declares " + std::to_string(8 * total),
                        payload_at);
    }
    std::size_t at = payload_at;
    for (auto& block : blocks) {
      for (double& v : block.values) {
        v = std::bit_cast<double>(get_u64(bytes, at));
        at += 8;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what(), prefix);
  }
  det.validate();
  if (header_out) *header_out = std::move(header);
  return det;
}

void write_checkpoint(const Detector& detector, const std::filesystem::path& path,
                      const nlohmann::json& extra) {
  write_file_bytes(path, encode_checkpoint(detector, extra));
}

Detector read_checkpoint(const std::filesystem::path& path, nlohmann::json* header) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_checkpoint(bytes, header);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

}  // namespace halomil
