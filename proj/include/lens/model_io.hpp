#pragma once

#include <filesystem>

#include "lens/io.hpp"
#include "lens/vit.hpp"

namespace lens {

template <typename T>
NamedTensors export_state(EnsembleVit<T>& model);

/// Loads every tensor of `model` from `values`; see EnsembleVit::load_state.
template <typename T>
void import_state(EnsembleVit<T>& model, const std::map<std::string, Tensor<float>>& values);

template <typename T>
void save_model(const std::filesystem::path& path, EnsembleVit<T>& model) {
  save_checkpoint(path, export_state(model));
}

template <typename T>
void load_model(const std::filesystem::path& path, EnsembleVit<T>& model) {
  import_state(model, load_checkpoint(path));
}

}  // namespace lens
