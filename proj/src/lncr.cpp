#include "lincir/lncr.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace lincir {
namespace {

constexpr char kMagic[4] = {'L', 'N', 'C', 'R'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  put_u32(out, std::bit_cast<uint32_t>(v));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  std::string raw(size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(size_t n) {
    if (pos_ + n > bytes_.size()) throw CorruptFileError("truncated file");
  }
  std::string bytes_;
  size_t pos_ = 0;
};

}  // namespace

const Tensor& LncrContents::tensor(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw CorruptFileError("missing tensor " + name);
  return it->second;
}

const std::vector<std::string>& LncrContents::string_list(const std::string& name) const {
  auto it = string_lists.find(name);
  if (it == string_lists.end()) throw CorruptFileError("missing string list " + name);
  return it->second;
}

void LncrWriter::add_tensor(const std::string& name, const Tensor& t) {
  entries_.push_back({name, true, t, {}});
}

void LncrWriter::add_string_list(const std::string& name, std::vector<std::string> items) {
  entries_.push_back({name, false, Tensor(), std::move(items)});
}

void LncrWriter::write(const std::string& path) const {
  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  for (const Entry& e : entries_) {
    nlohmann::ordered_json item;
    item["name"] = e.name;
    if (e.is_tensor) {
      item["kind"] = "f32";
      item["shape"] = e.tensor.shape();
    } else {
      item["kind"] = "strings";
      item["count"] = e.strings.size();
    }
    manifest.push_back(item);
  }
  nlohmann::ordered_json header;
  header["config"] = config_;
  header["manifest"] = manifest;
  const std::string header_bytes = header.dump();

  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<uint32_t>(header_bytes.size()));
  out += header_bytes;
  for (const Entry& e : entries_) {
    if (e.is_tensor) {
      for (int64_t i = 0; i < e.tensor.numel(); ++i)
        put_f32(out, static_cast<float>(e.tensor[i]));
    } else {
      for (const std::string& s : e.strings) {
        put_u32(out, static_cast<uint32_t>(s.size()));
        out += s;
      }
    }
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("lncr", "cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error("lncr", "write failed for " + path);
}

LncrContents lncr_read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("lncr", "cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes));

  if (r.raw(4) != std::string(kMagic, 4)) throw CorruptFileError("bad magic");
  const uint32_t version = r.u32();
  if (version != kVersion)
    throw CorruptFileError("unsupported version " + std::to_string(version));
  const uint32_t header_len = r.u32();
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(r.raw(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError(std::string("header parse failure: ") + e.what());
  }
  if (!header.contains("config") || !header.contains("manifest") ||
      !header["manifest"].is_array())
    throw CorruptFileError("header missing config or manifest");

  LncrContents out;
  out.config = header["config"];
  for (const auto& item : header["manifest"]) {
    const std::string name = item.at("name").get<std::string>();
    const std::string kind = item.at("kind").get<std::string>();
    if (kind == "f32") {
      std::vector<int64_t> shape = item.at("shape").get<std::vector<int64_t>>();
      const int64_t n = Tensor::count(shape);
      std::vector<double> values(n);
      for (int64_t i = 0; i < n; ++i) values[i] = static_cast<double>(r.f32());
      out.tensor_order.push_back(name);
      out.tensors.emplace(name, Tensor(std::move(shape), std::move(values)));
    } else if (kind == "strings") {
      const uint64_t count = item.at("count").get<uint64_t>();
      std::vector<std::string> items;
      items.reserve(count);
      for (uint64_t i = 0; i < count; ++i) {
        const uint32_t len = r.u32();
        items.push_back(r.raw(len));
      }
      out.string_lists.emplace(name, std::move(items));
    } else {
      throw CorruptFileError("unknown payload kind " + kind);
    }
  }
  if (!r.done()) throw CorruptFileError("trailing bytes after payloads");
  return out;
}

}  // namespace lincir
