#include "msgnet/tensors.hpp"

#include <cstring>

#include "msgnet/errors.hpp"

namespace msgnet::tensors {

torch::Tensor from_images(const std::vector<shapeworld::Image>& images) {
    if (images.empty()) {
        return torch::empty({0, 3, 0, 0});
    }
    const auto h = images.front().height;
    const auto w = images.front().width;
    auto bytes = torch::empty({static_cast<std::int64_t>(images.size()), h, w, 3}, torch::kUInt8);
    auto* dst = bytes.data_ptr<std::uint8_t>();
    for (const auto& img : images) {
        if (img.height != h || img.width != w) {
            throw ShapeError("from_images: images differ in size");
        }
        std::memcpy(dst, img.rgb.data(), img.rgb.size());
        dst += img.rgb.size();
    }
    return bytes.permute({0, 3, 1, 2}).to(torch::kFloat32).div(127.5).sub(1.0).contiguous();
}

shapeworld::Image to_image(const torch::Tensor& chw) {
    if (chw.dim() != 3 || chw.size(0) != 3) {
        throw ShapeError("to_image expects a [3, H, W] tensor");
    }
    const auto bytes = chw.detach()
                           .to(torch::kFloat32)
                           .clamp(-1.0, 1.0)
                           .add(1.0)
                           .mul(127.5)
                           .round()
                           .to(torch::kUInt8)
                           .permute({1, 2, 0})
                           .contiguous();
    shapeworld::Image img;
    img.height = chw.size(1);
    img.width = chw.size(2);
    img.rgb.assign(bytes.data_ptr<std::uint8_t>(), bytes.data_ptr<std::uint8_t>() + bytes.numel());
    return img;
}

torch::Tensor from_layouts(const std::vector<shapeworld::LayoutMap>& layouts) {
    if (layouts.empty()) {
        return torch::empty({0, 0, 0}, torch::kLong);
    }
    const auto h = layouts.front().height;
    const auto w = layouts.front().width;
    auto bytes = torch::empty({static_cast<std::int64_t>(layouts.size()), h, w}, torch::kUInt8);
    auto* dst = bytes.data_ptr<std::uint8_t>();
    for (const auto& l : layouts) {
        if (l.height != h || l.width != w) {
            throw ShapeError("from_layouts: layouts differ in size");
        }
        std::memcpy(dst, l.labels.data(), l.labels.size());
        dst += l.labels.size();
    }
    return bytes.to(torch::kLong);
}

shapeworld::LayoutMap to_layout(const torch::Tensor& hw) {
    if (hw.dim() != 2) {
        throw ShapeError("to_layout expects a [H, W] tensor");
    }
    if (hw.numel() > 0 && (hw.min().item<std::int64_t>() < 0 || hw.max().item<std::int64_t>() > 255)) {
        throw ValidationError("layout labels must fit in 8 bits");
    }
    const auto bytes = hw.detach().to(torch::kUInt8).contiguous();
    shapeworld::LayoutMap out;
    out.height = hw.size(0);
    out.width = hw.size(1);
    out.labels.assign(bytes.data_ptr<std::uint8_t>(), bytes.data_ptr<std::uint8_t>() + bytes.numel());
    return out;
}

}  // namespace msgnet::tensors
