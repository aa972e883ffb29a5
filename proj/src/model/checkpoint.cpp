#include "mmchat/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mmchat/errors.hpp"

namespace mmchat {

static_assert(std::endian::native == std::endian::little, "checkpoint layout is little-endian");

namespace {

constexpr char kMagic[4] = {'M', 'M', 'F', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kAlign = 64;

std::size_t align_up(std::size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw ParseError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const CheckpointContents& contents) {
  std::string header(kMagic, 4);
  put<std::uint32_t>(header, kVersion);
  put<std::uint32_t>(header, static_cast<std::uint32_t>(contents.tensors.size()));

  // Header size is known before offsets are assigned.
  std::size_t header_size = header.size();
  for (const auto& [name, t] : contents.tensors) {
    if (t.is_meta()) throw InputError("cannot save shape-only tensor '" + name + "'");
    if (name.size() > UINT16_MAX) throw InputError("tensor name too long: " + name);
    header_size += 2 + name.size() + 2 + 8 * t.rank() + 8;
  }
  const std::string config = contents.config.to_text();
  header_size += 8 + config.size();

  std::size_t offset = align_up(header_size);
  std::vector<std::size_t> offsets;
  for (const auto& [name, t] : contents.tensors) {
    offsets.push_back(offset);
    offset = align_up(offset + t.numel() * sizeof(float));
  }

  std::size_t i = 0;
  for (const auto& [name, t] : contents.tensors) {
    put<std::uint16_t>(header, static_cast<std::uint16_t>(name.size()));
    header += name;
    put<std::uint8_t>(header, 0);
    put<std::uint8_t>(header, static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) put<std::uint64_t>(header, e);
    put<std::uint64_t>(header, offsets[i++]);
  }
  put<std::uint64_t>(header, config.size());
  header += config;

  std::string blob = std::move(header);
  i = 0;
  for (const auto& [name, t] : contents.tensors) {
    blob.resize(offsets[i++], '\0');
    const auto d = t.data();
    blob.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(float));
  }
  blob.resize(align_up(blob.size()), '\0');

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into " + path.string() + ": " + ec.message());
}

CheckpointContents read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();

  Reader r(bytes);
  if (r.take(4) != std::string_view(kMagic, 4)) throw ParseError("not a checkpoint: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = std::string(r.take(r.get<std::uint16_t>()));
    if (r.get<std::uint8_t>() != 0) throw ParseError("tensor '" + e.name + "' has unknown dtype");
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t a = 0; a < rank; ++a) e.shape.push_back(r.get<std::uint64_t>());
    e.offset = r.get<std::uint64_t>();
    entries.push_back(std::move(e));
  }
  CheckpointContents out;
  out.config = KeyValues::parse(r.take(r.get<std::uint64_t>()));

  for (auto& e : entries) {
    const std::size_t n = shape_numel(e.shape);
    if (e.offset < r.pos() || e.offset > bytes.size() || (bytes.size() - e.offset) / sizeof(float) < n) {
      throw ParseError("tensor '" + e.name + "' data lies outside the file");
    }
    std::vector<float> values(n);
    std::memcpy(values.data(), bytes.data() + e.offset, n * sizeof(float));
    if (!out.tensors.emplace(e.name, Tensor::from_data(e.shape, std::move(values))).second) {
      throw ParseError("duplicate tensor '" + e.name + "'");
    }
  }
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[digest[i] >> 4]);
    hex.push_back(kHex[digest[i] & 15]);
  }
  return hex;
}

std::string tensor_hash(const Tensor& t) {
  std::string bytes = shape_string(t.shape());
  const auto d = t.data();
  bytes.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(float));
  return sha256_hex(bytes);
}

std::string encode_merges(const Vocab& vocab) {
  std::string out;
  for (const auto& [a, b] : vocab.merges()) {
    if (!out.empty()) out += ' ';
    out += std::to_string(a) + ',' + std::to_string(b);
  }
  return out;
}

Vocab decode_merges(const std::string& text) {
  std::vector<Vocab::Merge> merges;
  std::istringstream in(text);
  std::string item;
  while (in >> item) {
    const auto comma = item.find(',');
    TokenId a = 0, b = 0;
    if (comma == std::string::npos ||
        std::from_chars(item.data(), item.data() + comma, a).ec != std::errc{} ||
        std::from_chars(item.data() + comma + 1, item.data() + item.size(), b).ec != std::errc{}) {
      throw ParseError("bad merge entry '" + item + "'");
    }
    merges.emplace_back(a, b);
  }
  return Vocab(std::move(merges));
}

CheckpointContents bundle_contents(const ModelBundle& bundle) {
  CheckpointContents c;
  bundle.stack.config().write(c.config);
  c.config.set("tokenizer.merges", encode_merges(bundle.vocab));
  c.tensors = bundle.stack.weights();
  return c;
}

ModelBundle bundle_from_contents(const CheckpointContents& contents) {
  ModelBundle b;
  b.vocab = decode_merges(contents.config.get_or("tokenizer.merges", ""));
  const auto config = StackConfig::read(contents.config);
  config.validate();
  if (b.vocab.size() > config.vocab_size) {
    throw ParseError("tokenizer has " + std::to_string(b.vocab.size()) +
                     " entries but the model vocabulary is " + std::to_string(config.vocab_size));
  }
  WeightMap<float> weights;
  for (const auto& [name, t] : contents.tensors) {
    if (name.starts_with("enc.") || name.starts_with("proj.") || name.starts_with("lm.")) {
      weights.emplace(name, t);
    }
  }
  b.stack = Stack(config, std::move(weights));
  return b;
}

void save_bundle(const std::filesystem::path& path, const ModelBundle& bundle) {
  write_checkpoint(path, bundle_contents(bundle));
}

ModelBundle load_bundle(const std::filesystem::path& path) {
  return bundle_from_contents(read_checkpoint(path));
}

}  // namespace mmchat
