#pragma once

// VGG-16 topology (13 conv layers in five blocks, three dense layers) with a
// two-way classification tail. The spatial input side must be a multiple of
// 32 so the five pooling stages land on integer sizes; the dense head adapts
// to the resulting feature-map size.

#include <memory>
#include <string>
#include <vector>

#include "pmiris/common.hpp"
#include "pmiris/nn.hpp"

namespace pmiris {

inline const std::vector<std::vector<int>>& vgg16_blocks() {
    static const std::vector<std::vector<int>> blocks = {
        {64, 64}, {128, 128}, {256, 256, 256}, {512, 512, 512}, {512, 512, 512}};
    return blocks;
}

inline std::vector<std::string> vgg16_conv_names() {
    std::vector<std::string> names;
    const auto& blocks = vgg16_blocks();
    for (std::size_t b = 0; b < blocks.size(); ++b)
        for (std::size_t i = 0; i < blocks[b].size(); ++i)
            names.push_back("conv" + std::to_string(b + 1) + "_" + std::to_string(i + 1));
    return names;
}

// Spatial side of the named conv layer's feature map for a given input side.
inline int vgg16_feature_side(const std::string& conv_name, int input_size) {
    require(conv_name.size() >= 7 && conv_name.rfind("conv", 0) == 0, ErrKind::Config,
            "not a conv layer name: " + conv_name);
    const int block = conv_name[4] - '0';
    require(block >= 1 && block <= 5, ErrKind::Config, "not a VGG-16 conv block: " + conv_name);
    int side = input_size;
    for (int b = 1; b < block; ++b) side /= 2;
    return side;
}

template <typename T>
Net<T> build_vgg16(int input_size, double dropout_rate) {
    require(input_size >= 32 && input_size % 32 == 0, ErrKind::Config,
            "input_size must be a positive multiple of 32, got " + std::to_string(input_size));
    Net<T> net;
    int in_ch = 3;
    const auto& blocks = vgg16_blocks();
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        for (std::size_t i = 0; i < blocks[b].size(); ++i) {
            const std::string suffix = std::to_string(b + 1) + "_" + std::to_string(i + 1);
            net.layers.push_back(std::make_unique<Conv2d<T>>("conv" + suffix, in_ch, blocks[b][i], 3));
            net.layers.push_back(std::make_unique<Relu<T>>("relu" + suffix));
            in_ch = blocks[b][i];
        }
        net.layers.push_back(std::make_unique<MaxPool2<T>>("pool" + std::to_string(b + 1)));
    }
    const int feat_side = input_size / 32;
    const int flat = feat_side * feat_side * 512;
    net.layers.push_back(std::make_unique<Dense<T>>("fc6", flat, 4096));
    net.layers.push_back(std::make_unique<Relu<T>>("relu6"));
    net.layers.push_back(std::make_unique<Dropout<T>>("drop6", dropout_rate));
    net.layers.push_back(std::make_unique<Dense<T>>("fc7", 4096, 4096));
    net.layers.push_back(std::make_unique<Relu<T>>("relu7"));
    net.layers.push_back(std::make_unique<Dropout<T>>("drop7", dropout_rate));
    net.layers.push_back(std::make_unique<Dense<T>>("fc8", 4096, 2));
    return net;
}

// He-normal init for backbone weights, N(0, 0.01) for the replaced fc8 tail,
// zero biases throughout. Deterministic for a fixed seed.
template <typename T>
void init_vgg16_random(Net<T>& net, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& layer : net.layers) {
        if (auto* conv = dynamic_cast<Conv2d<T>*>(layer.get())) {
            const double fan_in = double(conv->in_channels()) * conv->kernel() * conv->kernel();
            const double sd = std::sqrt(2.0 / fan_in);
            for (auto& v : conv->weights().v) v = T(rng.normal() * sd);
            conv->bias().zero();
        } else if (auto* fc = dynamic_cast<Dense<T>*>(layer.get())) {
            const bool is_tail = fc->name() == "fc8";
            const double sd = is_tail ? 0.01 : std::sqrt(2.0 / double(fc->in_dim()));
            for (auto& v : fc->weights().v) v = T(rng.normal() * sd);
            fc->bias().zero();
        }
    }
}

// Feature-map hook for Grad-CAM: the post-activation output of a named conv
// layer, i.e. the relu layer that follows it.
template <typename T>
int vgg16_feature_layer_index(const Net<T>& net, const std::string& conv_name) {
    const int conv_idx = net.find(conv_name);
    if (conv_idx < 0 || std::string(net.layers[std::size_t(conv_idx)]->kind()) != "conv")
        fail(ErrKind::Config, "unknown convolutional layer: " + conv_name);
    const int relu_idx = conv_idx + 1;
    require(relu_idx < int(net.layers.size()) &&
                std::string(net.layers[std::size_t(relu_idx)]->kind()) == "relu",
            ErrKind::Internal, "conv layer without a trailing relu: " + conv_name);
    return relu_idx;
}

}  // namespace pmiris
