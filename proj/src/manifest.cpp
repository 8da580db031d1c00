#include "mixquant/manifest.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mixquant/errors.hpp"

namespace mixquant {

std::uint64_t fingerprint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError(path + ": cannot open for fingerprinting");
  std::uint64_t h = 14695981039346656037ULL;
  char buf[65536];
  while (in) {
    in.read(buf, sizeof(buf));
    std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  return h;
}

std::string fingerprint_string(std::uint64_t fp) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "fnv1a64:%016llx",
                static_cast<unsigned long long>(fp));
  return buf;
}

std::string manifest_to_json(const RunManifest& m) {
  nlohmann::json o;
  o["command"] = m.command;
  o["tool_version"] = m.tool_version;
  o["seed"] = m.seed;
  o["config"] = nlohmann::json::parse(m.config_json);
  auto entries = [](const std::vector<ManifestEntry>& list) {
    nlohmann::json arr = nlohmann::json::array();
    for (const ManifestEntry& e : list) {
      arr.push_back({{"name", e.name}, {"fingerprint", e.fingerprint}});
    }
    return arr;
  };
  o["inputs"] = entries(m.inputs);
  o["artifacts"] = entries(m.artifacts);
  return o.dump(2) + "\n";
}

void write_manifest(const RunManifest& m, const std::string& dir) {
  std::filesystem::path p = std::filesystem::path(dir) / "manifest.json";
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ArtifactError(p.string() + ": cannot open for writing");
  out << manifest_to_json(m);
  if (!out) throw ArtifactError(p.string() + ": write failed");
}

}  // namespace mixquant
