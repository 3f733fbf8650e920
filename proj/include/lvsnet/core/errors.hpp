#pragma once

#include <stdexcept>
#include <string>

namespace lvsnet {

// Tensor/block geometry violations (wrong dims, odd size at a pool, ...).
class shape_error : public std::runtime_error {
 public:
  explicit shape_error(const std::string& what) : std::runtime_error(what) {}
};

// Invalid ModelConfig / TrainConfig / plan values.
class config_error : public std::runtime_error {
 public:
  explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

// File and raster IO failures (missing dataset entries, bad magic, ...).
class io_error : public std::runtime_error {
 public:
  explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

// Bad label values (mask outside declared label set, unmapped colors).
class label_error : public std::runtime_error {
 public:
  explicit label_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace lvsnet
