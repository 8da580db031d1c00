#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mixquant {

inline constexpr const char* kToolVersion = "1.0.0";

// File named relative to the manifest's directory plus a content hash, so
// manifests from identical reruns are byte-identical regardless of where
// the output directory lives.
struct ManifestEntry {
  std::string name;
  std::string fingerprint;
};

// One manifest per output directory: what command produced it, the exact
// configuration, and content hashes of inputs and artifacts.
struct RunManifest {
  std::string command;
  std::string tool_version = kToolVersion;
  std::uint64_t seed = 0;
  std::string config_json = "{}";  // flag/config snapshot as a JSON object
  std::vector<ManifestEntry> inputs;
  std::vector<ManifestEntry> artifacts;
};

// FNV-1a 64-bit over the raw bytes of the file.
std::uint64_t fingerprint_file(const std::string& path);
std::string fingerprint_string(std::uint64_t fp);

std::string manifest_to_json(const RunManifest& m);

// Writes <dir>/manifest.json, replacing any previous one.
void write_manifest(const RunManifest& m, const std::string& dir);

}  // namespace mixquant
