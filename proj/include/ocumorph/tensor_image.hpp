#pragma once

#include <torch/torch.h>

#include "ocumorph/data_io.hpp"

namespace ocumorph {

// Normalized HxWx3 image -> float tensor [3, H, W]. Throws unless normalized.
torch::Tensor image_to_tensor(const io::OcularImage& image);
// Tensor [3, H, W] (or [1, 3, H, W]) in [-1, 1] -> normalized OcularImage.
io::OcularImage tensor_to_image(const torch::Tensor& tensor, std::string subject_id = {});

// Resize a normalized image to size x size (area interpolation when shrinking).
io::OcularImage resize_image(const io::OcularImage& image, int size);

}  // namespace ocumorph
