#include "lens/model_io.hpp"

namespace lens {

template <typename T>
NamedTensors export_state(EnsembleVit<T>& model) {
  NamedTensors out;
  for (auto& [name, v] : model.named_tensors()) {
    if constexpr (std::is_same_v<T, float>) {
      out.emplace_back(name, v.value());
    } else {
      out.emplace_back(name, v.value().template cast<float>());
    }
  }
  return out;
}

template <typename T>
void import_state(EnsembleVit<T>& model, const std::map<std::string, Tensor<float>>& values) {
  if constexpr (std::is_same_v<T, float>) {
    model.load_state(values);
  } else {
    std::map<std::string, Tensor<T>> cast;
    for (const auto& [name, t] : values) cast.emplace(name, t.template cast<T>());
    model.load_state(cast);
  }
}

template NamedTensors export_state<float>(EnsembleVit<float>&);
template NamedTensors export_state<double>(EnsembleVit<double>&);
template void import_state<float>(EnsembleVit<float>&, const std::map<std::string, Tensor<float>>&);
template void import_state<double>(EnsembleVit<double>&, const std::map<std::string, Tensor<float>>&);

}  // namespace lens
