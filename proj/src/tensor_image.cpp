#include "ocumorph/tensor_image.hpp"

#include <opencv2/imgproc.hpp>

namespace ocumorph {

torch::Tensor image_to_tensor(const io::OcularImage& image) {
    if (image.range != io::ValueRange::normalized_minus1_1) {
        throw Error("expected a normalized [-1, 1] image; run preprocess first");
    }
    cv::Mat px = image.pixels.isContinuous() ? image.pixels : image.pixels.clone();
    auto hwc = torch::from_blob(px.data, {px.rows, px.cols, 3}, torch::kFloat32);
    return hwc.permute({2, 0, 1}).contiguous().clone();
}

io::OcularImage tensor_to_image(const torch::Tensor& tensor, std::string subject_id) {
    torch::Tensor t = tensor.detach().to(torch::kCPU, torch::kFloat32);
    if (t.dim() == 4) t = t.squeeze(0);
    TORCH_CHECK(t.dim() == 3 && t.size(0) == 3, "expected a [3, H, W] tensor");
    t = t.permute({1, 2, 0}).contiguous();
    cv::Mat px(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), CV_32FC3, t.data_ptr<float>());
    io::OcularImage out;
    out.pixels = px.clone();
    out.range = io::ValueRange::normalized_minus1_1;
    out.subject_id = std::move(subject_id);
    return out;
}

io::OcularImage resize_image(const io::OcularImage& image, int size) {
    if (image.width() == size && image.height() == size) return image;
    io::OcularImage out = image;
    const int interp = size < image.width() ? cv::INTER_AREA : cv::INTER_LINEAR;
    cv::resize(image.pixels, out.pixels, cv::Size(size, size), 0, 0, interp);
    return out;
}

}  // namespace ocumorph
