#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "halomil/bagstore.hpp"

namespace halomil {

namespace {

static_assert(std::numeric_limits<float>::is_iec559, "HSB1 requires IEEE-754 binary32");

class ByteWriter {
 public:
  explicit ByteWriter(std::vector<std::uint8_t>& out) : out_(out) {}

  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t>& out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() { return std::bit_cast<float>(u32()); }

 private:
  std::uint64_t get(int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

float to_storage_float(double v, std::uint64_t bag_id) {
  const auto f = static_cast<float>(v);
  if (!std::isfinite(v) || !std::isfinite(f)) {
    throw PreconditionError("bag " + std::to_string(bag_id) +
                            ": value not representable as a finite 32-bit float");
  }
  return f;
}

}  // namespace

std::vector<std::uint8_t> encode_hsb(const DatasetStore& store) {
  store.validate();
  if (store.dim() > std::numeric_limits<std::uint32_t>::max()) {
    throw PreconditionError("dimension too large for HSB1");
  }
  std::size_t total = kHsbHeaderBytes;
  for (const auto& bag : store.bags()) total += kHsbBagHeaderBytes + 4 * bag.tokens.size();

  std::vector<std::uint8_t> out;
  out.reserve(total);
  ByteWriter w(out);
  for (char c : kHsbMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kHsbVersion);
  w.u32(static_cast<std::uint32_t>(store.dim()));
  w.u32(0);
  w.u64(store.size());

  for (const auto& bag : store.bags()) {
    if (bag.length() > std::numeric_limits<std::uint32_t>::max()) {
      throw PreconditionError("bag " + std::to_string(bag.id) + ": too many tokens for HSB1");
    }
    w.u64(bag.id);
    w.u8(static_cast<std::uint8_t>(static_cast<std::int8_t>(bag.label)));
    w.u8(static_cast<std::uint8_t>(bag.split));
    w.u16(0);
    w.f32(bag.p_sem ? to_storage_float(*bag.p_sem, bag.id)
                    : std::numeric_limits<float>::quiet_NaN());
    w.u32(static_cast<std::uint32_t>(bag.length()));
    // Matrix is row-major, so this walks token-major.
    const double* data = bag.tokens.data();
    for (Eigen::Index i = 0; i < bag.tokens.size(); ++i) w.f32(to_storage_float(data[i], bag.id));
  }
  return out;
}

DatasetStore decode_hsb(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.remaining() < kHsbHeaderBytes) throw FormatError("truncated HSB1 header", bytes.size());
  if (std::memcmp(bytes.data(), kHsbMagic.data(), kHsbMagic.size()) != 0) {
    throw FormatError("bad magic, expected \"HSB1\"", 0);
  }
  r.u32();
  if (const auto version = r.u32(); version != kHsbVersion) {
    throw FormatError("unsupported HSB1 version " + std::to_string(version), 4);
  }
  const auto dim = r.u32();
  if (dim == 0) throw FormatError("hidden dimension d must be positive", 8);
  if (r.u32() != 0) throw FormatError("reserved header field must be zero", 12);
  const auto n_bags = r.u64();

  // Every bag needs at least its header and one token; reject impossible counts
  // before allocating anything proportional to them.
  const std::uint64_t min_bag_bytes = kHsbBagHeaderBytes + 4ull * dim;
  if (n_bags > r.remaining() / min_bag_bytes) {
    const std::uint64_t complete = r.remaining() / min_bag_bytes;
    throw FormatError("truncated payload: file cannot hold bag " + std::to_string(complete) +
                          " of " + std::to_string(n_bags) + " declared bags",
                      bytes.size());
  }

  DatasetStore store(dim);
  for (std::uint64_t b = 0; b < n_bags; ++b) {
    const std::string where = "bag " + std::to_string(b);
    const std::size_t bag_start = r.offset();
    if (r.remaining() < kHsbBagHeaderBytes) {
      throw FormatError("truncated payload in " + where + " header", bytes.size());
    }
    Bag bag;
    bag.id = r.u64();
    const auto raw_label = static_cast<std::int8_t>(r.u8());
    if (raw_label < -1 || raw_label > 1) {
      throw FormatError(where + ": invalid label " + std::to_string(raw_label), bag_start + 8);
    }
    bag.label = static_cast<Label>(raw_label);
    const auto raw_split = r.u8();
    if (raw_split >= kNumSplits) {
      throw FormatError(where + ": invalid split tag " + std::to_string(raw_split), bag_start + 9);
    }
    bag.split = static_cast<Split>(raw_split);
    if (r.u16() != 0) throw FormatError(where + ": nonzero padding", bag_start + 10);
    const float p_sem = r.f32();
    if (!std::isnan(p_sem)) {
      if (!(p_sem >= 0.0f && p_sem <= 1.0f)) {
        throw FormatError(where + ": p_sem outside [0,1]", bag_start + 12);
      }
      bag.p_sem = static_cast<double>(p_sem);
    }
    const auto length = r.u32();
    if (length == 0) throw FormatError(where + ": token count must be positive", bag_start + 16);
    const std::uint64_t payload = 4ull * length * dim;
    if (payload > r.remaining()) {
      throw FormatError("truncated payload in " + where + ": need " + std::to_string(payload) +
                            " bytes, have " + std::to_string(r.remaining()),
                        bytes.size());
    }
    bag.tokens.resize(length, dim);
    double* data = bag.tokens.data();
    for (std::uint64_t i = 0; i < static_cast<std::uint64_t>(length) * dim; ++i) {
      const std::size_t at = r.offset();
      const float v = r.f32();
      if (!std::isfinite(v)) throw FormatError(where + ": non-finite hidden state", at);
      data[i] = static_cast<double>(v);
    }
    store.add(std::move(bag));
  }
  if (r.remaining() != 0) {
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after last bag", r.offset());
  }
  return store;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

void write_hsb(const DatasetStore& store, const std::filesystem::path& path) {
  write_file_bytes(path, encode_hsb(store));
}

DatasetStore read_hsb(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_hsb(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

std::filesystem::path meta_sidecar_path(const std::filesystem::path& hsb_path) {
  return std::filesystem::path(hsb_path.string() + ".meta.jsonl");
}

void write_meta_sidecar(const BagMetadata& meta, const std::filesystem::path& hsb_path) {
  const auto path = meta_sidecar_path(hsb_path);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& [id, fields] : meta) {
    nlohmann::json line = fields.is_object() ? fields : nlohmann::json::object();
    line["bag_id"] = id;
    out << line.dump() << '\n';
  }
}

BagMetadata read_meta_sidecar(const std::filesystem::path& hsb_path) {
  const auto path = meta_sidecar_path(hsb_path);
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  BagMetadata meta;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw PreconditionError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!obj.is_object() || !obj.contains("bag_id") || !obj["bag_id"].is_number_unsigned()) {
      throw PreconditionError(path.string() + ":" + std::to_string(line_no) +
                              ": expected an object with an unsigned bag_id");
    }
    const auto id = obj["bag_id"].get<std::uint64_t>();
    obj.erase("bag_id");
    meta[id] = std::move(obj);
  }
  return meta;
}

}  // namespace halomil
