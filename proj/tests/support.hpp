#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <string>

#include "thermoviab/features.hpp"
#include "thermoviab/phantom.hpp"
#include "thermoviab/rng.hpp"

namespace tvtest {

namespace fs = std::filesystem;

/// Scratch directory removed on destruction.
struct TempDir {
  fs::path path;

  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path = fs::temp_directory_path() /
           ("thermoviab-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

/// Shrinks a phantom spec geometrically (frame, disk, nodule) by `factor`.
inline thermoviab::PhantomSpec scaled(thermoviab::PhantomSpec s, double factor) {
  s.width = static_cast<int>(s.width * factor);
  s.height = static_cast<int>(s.height * factor);
  s.disk_center = {s.disk_center.x * factor, s.disk_center.y * factor};
  s.nodule_center = {s.nodule_center.x * factor, s.nodule_center.y * factor};
  s.disk_radius *= factor;
  s.nodule_radius *= factor;
  return s;
}

/// Feature record with every family filled with N(0,1) noise; the first
/// three columns of each family are shifted by 1.5 for label 1.
inline thermoviab::FeatureRecord synthetic_record(thermoviab::Rng& rng, int label, const std::string& id) {
  using namespace thermoviab;
  FeatureRecord r;
  r.case_id = id;
  r.nodule_id = "n1";
  for (std::size_t i = 0; i < 5; ++i) {
    const Family f = kFamilies[i];
    r.blocks[i].family = f;
    r.blocks[i].names = feature_names(f);
    r.blocks[i].values.resize(family_size(f));
    const double shift = label ? 1.5 : 0.0;
    for (std::size_t j = 0; j < r.blocks[i].values.size(); ++j) {
      r.blocks[i].values[j] = rng.normal() + (j < 3 ? shift : 0.0);
    }
  }
  return r;
}

}  // namespace tvtest
