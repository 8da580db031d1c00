#include "mixquant/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "mixquant/errors.hpp"
#include "mixquant/rng.hpp"

namespace mixquant {

namespace {

constexpr char kMagic[16] = {'M', 'I', 'X', 'Q', 'U', 'A', 'N', 'T',
                             '-', 'E', 'M', 'B', '\0', '\0', '\0', '\0'};

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

class ByteReader {
 public:
  ByteReader(const std::string& buf, const std::string& path)
      : buf_(buf), path_(path) {}

  std::uint16_t u16() { return static_cast<std::uint16_t>(byte() | byte() << 8); }

  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte()) << (8 * i);
    return v;
  }

  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == buf_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  std::uint8_t byte() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }

  void need(std::size_t n) {
    if (pos_ + n > buf_.size()) {
      throw ParseError(path_ + ": truncated at byte " + std::to_string(pos_));
    }
  }

  const std::string& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

Tensor unit_vector(std::size_t dim, Rng& rng) {
  Tensor v = Tensor::zeros({dim});
  double n = 0.0;
  do {
    for (double& x : v.values()) x = rng.normal();
    n = l2_norm(v.span());
  } while (n < 1e-9);
  for (double& x : v.values()) x /= n;
  return v;
}

Dataset load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path + ": cannot open");
  std::vector<ItemRecord> items;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    try {
      ItemRecord rec;
      rec.item_id = j.at("item_id").get<std::string>();
      rec.e_t = Tensor::vec(j.at("e_t").get<std::vector<double>>());
      rec.e_v = Tensor::vec(j.at("e_v").get<std::vector<double>>());
      rec.e_b = Tensor::vec(j.at("e_b").get<std::vector<double>>());
      items.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return make_dataset(std::move(items));
}

Dataset load_packed(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string buf = ss.str();

  ByteReader r(buf, path);
  if (r.bytes(16) != std::string(kMagic, 16)) {
    throw ParseError(path + ": bad magic");
  }
  std::size_t d_t = r.u32();
  std::size_t d_v = r.u32();
  std::size_t d_b = r.u32();
  std::uint32_t count = r.u32();

  std::vector<ItemRecord> items;
  items.reserve(count);
  auto read_vec = [&](std::size_t dim) {
    Tensor t = Tensor::zeros({dim});
    for (std::size_t i = 0; i < dim; ++i) t[i] = static_cast<double>(r.f32());
    return t;
  };
  for (std::uint32_t i = 0; i < count; ++i) {
    ItemRecord rec;
    rec.item_id = r.bytes(r.u16());
    rec.e_t = read_vec(d_t);
    rec.e_v = read_vec(d_v);
    rec.e_b = read_vec(d_b);
    items.push_back(std::move(rec));
  }
  if (!r.done()) {
    throw ParseError(path + ": trailing bytes at " + std::to_string(r.pos()));
  }
  return make_dataset(std::move(items));
}

void save_jsonl(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(path + ": cannot open for writing");
  for (const ItemRecord& rec : ds.items) {
    nlohmann::json j;
    j["item_id"] = rec.item_id;
    j["e_t"] = rec.e_t.values();
    j["e_v"] = rec.e_v.values();
    j["e_b"] = rec.e_b.values();
    out << j.dump() << '\n';
  }
}

void save_packed(const Dataset& ds, const std::string& path) {
  std::string buf(kMagic, 16);
  put_u32(buf, static_cast<std::uint32_t>(ds.dims.d_t));
  put_u32(buf, static_cast<std::uint32_t>(ds.dims.d_v));
  put_u32(buf, static_cast<std::uint32_t>(ds.dims.d_b));
  put_u32(buf, static_cast<std::uint32_t>(ds.items.size()));
  for (const ItemRecord& rec : ds.items) {
    if (rec.item_id.size() > 0xffff) {
      throw SchemaError("item id too long for packed format: " + rec.item_id);
    }
    put_u16(buf, static_cast<std::uint16_t>(rec.item_id.size()));
    buf += rec.item_id;
    for (const Tensor* t : {&rec.e_t, &rec.e_v, &rec.e_b}) {
      for (double v : t->values()) put_f32(buf, static_cast<float>(v));
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(path + ": cannot open for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

}  // namespace

NormStats compute_norm_stats(const std::vector<ItemRecord>& items) {
  if (items.empty()) throw PreconditionError("compute_norm_stats: empty item list");
  NormStats stats;
  stats.n_min = stats.n_max = l2_norm(items[0].e_b.span());
  for (const ItemRecord& rec : items) {
    double n = l2_norm(rec.e_b.span());
    stats.n_min = std::min(stats.n_min, n);
    stats.n_max = std::max(stats.n_max, n);
  }
  return stats;
}

Dataset make_dataset(std::vector<ItemRecord> items) {
  if (items.empty()) throw SchemaError("dataset is empty");
  Dataset ds;
  ds.dims = {items[0].e_t.size(), items[0].e_v.size(), items[0].e_b.size()};
  std::unordered_set<std::string> seen;
  for (const ItemRecord& rec : items) {
    if (!seen.insert(rec.item_id).second) {
      throw SchemaError("duplicate item_id: " + rec.item_id);
    }
    Dims d{rec.e_t.size(), rec.e_v.size(), rec.e_b.size()};
    if (!(d == ds.dims)) {
      throw SchemaError("item " + rec.item_id + ": dims (" + std::to_string(d.d_t) +
                        "," + std::to_string(d.d_v) + "," + std::to_string(d.d_b) +
                        ") do not match dataset dims (" + std::to_string(ds.dims.d_t) +
                        "," + std::to_string(ds.dims.d_v) + "," +
                        std::to_string(ds.dims.d_b) + ")");
    }
    if (!rec.e_t.finite() || !rec.e_v.finite() || !rec.e_b.finite()) {
      throw SchemaError("item " + rec.item_id + ": non-finite embedding");
    }
  }
  ds.items = std::move(items);
  ds.norm_stats = compute_norm_stats(ds.items);
  return ds;
}

Dataset load_dataset(const std::string& path, DataFormat format) {
  return format == DataFormat::jsonl ? load_jsonl(path) : load_packed(path);
}

void save_dataset(const Dataset& ds, const std::string& path, DataFormat format) {
  if (format == DataFormat::jsonl) {
    save_jsonl(ds, path);
  } else {
    save_packed(ds, path);
  }
}

Dataset generate_synthetic(std::size_t n_items, Dims dims, std::size_t n_clusters,
                           double zipf_s, std::uint64_t seed,
                           double noise_behavior_fraction) {
  if (n_clusters < 1 || n_items < n_clusters) {
    throw PreconditionError("generate_synthetic: need n_items >= n_clusters >= 1");
  }
  if (!(zipf_s > 0.0)) {
    throw PreconditionError("generate_synthetic: need zipf_s > 0");
  }
  if (noise_behavior_fraction < 0.0 || noise_behavior_fraction > 1.0) {
    throw PreconditionError("generate_synthetic: noise_behavior_fraction outside [0, 1]");
  }
  std::size_t first_noise_item = n_items - static_cast<std::size_t>(
      noise_behavior_fraction * static_cast<double>(n_items));
  Rng rng(seed);
  std::vector<Tensor> c_t, c_v, c_b;
  for (std::size_t k = 0; k < n_clusters; ++k) {
    c_t.push_back(unit_vector(dims.d_t, rng));
    c_v.push_back(unit_vector(dims.d_v, rng));
    c_b.push_back(unit_vector(dims.d_b, rng));
  }

  // Popularity rank r = item index + 1. The norm decays log-compressed in r
  // rather than as a raw power law, so the full norm range stays within one
  // decade and the rank ordering is exact.
  double log_n = std::log(static_cast<double>(std::max<std::size_t>(n_items, 2)));

  std::vector<ItemRecord> items;
  items.reserve(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    std::size_t k = static_cast<std::size_t>(rng.below(n_clusters));
    char id[32];
    std::snprintf(id, sizeof(id), "item_%06zu", i);

    ItemRecord rec;
    rec.item_id = id;
    rec.e_t = c_t[k];
    rec.e_v = c_v[k];
    Tensor u_t = unit_vector(dims.d_t, rng);
    Tensor u_v = unit_vector(dims.d_v, rng);
    for (std::size_t j = 0; j < dims.d_t; ++j) rec.e_t[j] += kSyntheticNoiseRadius * u_t[j];
    for (std::size_t j = 0; j < dims.d_v; ++j) rec.e_v[j] += kSyntheticNoiseRadius * u_v[j];

    Tensor u_b = unit_vector(dims.d_b, rng);
    Tensor dir = i >= first_noise_item ? u_b : c_b[k];
    if (i < first_noise_item) {
      for (std::size_t j = 0; j < dims.d_b; ++j) dir[j] += kSyntheticNoiseRadius * u_b[j];
    }
    double dn = l2_norm(dir.span());
    double rank = static_cast<double>(i + 1);
    double scale = kSyntheticNormCeiling * std::exp(-zipf_s * std::log(rank) / log_n);
    rec.e_b = Tensor::zeros({dims.d_b});
    for (std::size_t j = 0; j < dims.d_b; ++j) rec.e_b[j] = scale * dir[j] / dn;

    items.push_back(std::move(rec));
  }
  return make_dataset(std::move(items));
}

}  // namespace mixquant
