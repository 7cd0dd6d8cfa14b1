#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "lincir/tensor.hpp"

namespace lincir {

// Checkpoint container: "LNCR" magic, u32 version, length-prefixed JSON
// header (free-form config plus an ordered payload manifest), then raw
// little-endian payloads in manifest order. Tensors are stored as f32 and
// widened to f64 on load, so a load/save round trip is byte identical.

class CorruptFileError : public Error {
 public:
  explicit CorruptFileError(const std::string& message) : Error("lncr", message) {}
};

struct LncrContents {
  nlohmann::ordered_json config;
  std::vector<std::string> tensor_order;
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::vector<std::string>> string_lists;

  const Tensor& tensor(const std::string& name) const;
  const std::vector<std::string>& string_list(const std::string& name) const;
};

class LncrWriter {
 public:
  explicit LncrWriter(nlohmann::ordered_json config) : config_(std::move(config)) {}

  void add_tensor(const std::string& name, const Tensor& t);
  void add_string_list(const std::string& name, std::vector<std::string> items);
  void write(const std::string& path) const;

 private:
  struct Entry {
    std::string name;
    bool is_tensor;
    Tensor tensor;
    std::vector<std::string> strings;
  };
  nlohmann::ordered_json config_;
  std::vector<Entry> entries_;
};

LncrContents lncr_read(const std::string& path);

}  // namespace lincir
