#pragma once

#include <cstdio>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace pgns {

// Named trainable tensors plus first/second moment state for the adaptive
// optimizer. Iteration order is the name order, which keeps updates and
// checkpoints deterministic.
template <class T>
class ParamStore {
 public:
  struct Entry {
    Tensor<T> value;
    Tensor<T> m;
    Tensor<T> v;
  };

  void add(const std::string& name, Tensor<T> init) {
    require(entries_.find(name) == entries_.end(), "param already registered: " + name);
    Entry e;
    e.m = Tensor<T>(init.rows(), init.cols());
    e.v = Tensor<T>(init.rows(), init.cols());
    e.value = std::move(init);
    entries_[name] = std::move(e);
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = entries_.find(name);
    require(it != entries_.end(), "unknown parameter: " + name);
    return it->second.value;
  }

  Tensor<T>& mutable_value(const std::string& name) {
    auto it = entries_.find(name);
    require(it != entries_.end(), "unknown parameter: " + name);
    return it->second.value;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (auto& [k, v] : entries_) out.push_back(k);
    return out;
  }

  int64_t step_count() const { return step_; }
  size_t size() const { return entries_.size(); }

  size_t scalar_count() const {
    size_t n = 0;
    for (auto& [k, e] : entries_) n += e.value.size();
    return n;
  }

  // Bias-corrected adaptive moment update. Parameters without a gradient
  // entry keep their value; the step count advances once per call.
  void adam_step(const std::map<std::string, Tensor<T>>& grads, double lr, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8) {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1, double(step_));
    const double bc2 = 1.0 - std::pow(beta2, double(step_));
    for (auto& [name, e] : entries_) {
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const Tensor<T>& g = git->second;
      require(g.same_shape(e.value), "gradient shape mismatch for parameter: " + name);
      for (size_t i = 0; i < e.value.size(); ++i) {
        T gi = g.data[i];
        e.m.data[i] = T(beta1) * e.m.data[i] + T(1 - beta1) * gi;
        e.v.data[i] = T(beta2) * e.v.data[i] + T(1 - beta2) * gi * gi;
        double mh = double(e.m.data[i]) / bc1;
        double vh = double(e.v.data[i]) / bc2;
        e.value.data[i] -= T(lr * mh / (std::sqrt(vh) + eps));
      }
    }
  }

  // --- checkpoint format ---
  // magic "PGNS" | version u32 | count u32 | entries, each:
  //   name_len u32 | name bytes | ndim u32 | dims u32[ndim] | values f64 LE.
  // Optimizer moments ride along under the "opt.m/" and "opt.v/" prefixes and
  // the step count under "meta/step", so resume continues bit-exactly.

  void save(const std::string& path) const {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot write checkpoint: " + path);
    std::fwrite("PGNS", 1, 4, f);
    write_u32(f, 1);
    uint32_t count = uint32_t(entries_.size() * 3 + 1);
    write_u32(f, count);
    Tensor<double> step_t(1, 1);
    step_t.data[0] = double(step_);
    write_entry(f, "meta/step", step_t);
    for (auto& [name, e] : entries_) write_entry(f, name, tensor_to_double(e.value));
    for (auto& [name, e] : entries_) write_entry(f, "opt.m/" + name, tensor_to_double(e.m));
    for (auto& [name, e] : entries_) write_entry(f, "opt.v/" + name, tensor_to_double(e.v));
    std::fclose(f);
  }

  // Loads values into an already-built store; every non-meta entry must match
  // a registered parameter of the same shape.
  void load(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError("cannot read checkpoint: " + path);
    char magic[4];
    if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, "PGNS", 4) != 0) {
      std::fclose(f);
      throw IoError("bad checkpoint magic: " + path);
    }
    uint32_t version = read_u32(f);
    if (version != 1) {
      std::fclose(f);
      throw IoError("unsupported checkpoint version " + std::to_string(version));
    }
    uint32_t count = read_u32(f);
    for (uint32_t i = 0; i < count; ++i) {
      std::string name;
      Tensor<double> t = read_entry(f, name);
      if (name == "meta/step") {
        step_ = int64_t(t.data[0]);
      } else if (name.rfind("opt.m/", 0) == 0) {
        assign(name.substr(6), t, [](Entry& e) -> Tensor<T>& { return e.m; });
      } else if (name.rfind("opt.v/", 0) == 0) {
        assign(name.substr(6), t, [](Entry& e) -> Tensor<T>& { return e.v; });
      } else {
        assign(name, t, [](Entry& e) -> Tensor<T>& { return e.value; });
      }
    }
    std::fclose(f);
  }

 private:
  std::map<std::string, Entry> entries_;
  int64_t step_ = 0;

  template <class Pick>
  void assign(const std::string& name, const Tensor<double>& t, Pick&& pick) {
    auto it = entries_.find(name);
    require(it != entries_.end(), "checkpoint names unknown parameter: " + name);
    Tensor<T>& dst = pick(it->second);
    require(dst.rows() == t.rows() && dst.cols() == t.cols(), "checkpoint shape mismatch for: " + name);
    for (size_t i = 0; i < t.size(); ++i) dst.data[i] = T(t.data[i]);
  }

  static void write_u32(FILE* f, uint32_t v) { std::fwrite(&v, 4, 1, f); }
  static uint32_t read_u32(FILE* f) {
    uint32_t v = 0;
    if (std::fread(&v, 4, 1, f) != 1) throw IoError("truncated checkpoint");
    return v;
  }

  static void write_entry(FILE* f, const std::string& name, const Tensor<double>& t) {
    write_u32(f, uint32_t(name.size()));
    std::fwrite(name.data(), 1, name.size(), f);
    write_u32(f, 2);
    write_u32(f, uint32_t(t.rows()));
    write_u32(f, uint32_t(t.cols()));
    std::fwrite(t.data.data(), 8, t.data.size(), f);
  }

  static Tensor<double> read_entry(FILE* f, std::string& name) {
    uint32_t len = read_u32(f);
    require(len < 4096, "checkpoint name too long");
    name.resize(len);
    if (len && std::fread(name.data(), 1, len, f) != len) throw IoError("truncated checkpoint");
    uint32_t ndim = read_u32(f);
    require(ndim == 2, "checkpoint entries are rank-2");
    uint32_t r = read_u32(f), c = read_u32(f);
    Tensor<double> t(static_cast<int>(r), static_cast<int>(c));
    if (t.size() && std::fread(t.data.data(), 8, t.size(), f) != t.size()) throw IoError("truncated checkpoint");
    return t;
  }
};

}  // namespace pgns
