#pragma once

#include <torch/torch.h>

#include <vector>

#include "msgnet/shapeworld.hpp"

namespace msgnet::tensors {

/// [N, 3, S, S] float32 in [-1, 1].
torch::Tensor from_images(const std::vector<shapeworld::Image>& images);
/// Clamps to [-1, 1] and rounds to 8 bits.
shapeworld::Image to_image(const torch::Tensor& chw);

/// [N, H, W] int64.
torch::Tensor from_layouts(const std::vector<shapeworld::LayoutMap>& layouts);
shapeworld::LayoutMap to_layout(const torch::Tensor& hw);

}  // namespace msgnet::tensors
