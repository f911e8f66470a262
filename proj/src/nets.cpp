#include "xmgc/nets.hpp"

#include <algorithm>
#include <cmath>

#include "xmgc/error.hpp"

namespace xmgc {

namespace {

bool power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

int log2_int(int v) {
    int e = 0;
    while ((1 << e) < v) ++e;
    return e;
}

void check_resolution(int resolution, int depth, const char* what) {
    if (!power_of_two(resolution) || resolution < (1 << depth)) {
        throw ValueError(std::string(what) + " needs a power-of-two resolution >= 2^depth; got " +
                         std::to_string(resolution) + " with depth " + std::to_string(depth));
    }
}

int width_at(int base_filters, int level) {
    return std::min(base_filters * (1 << level), 512);
}

void add_conv_params(ParameterSet& params, const LayerSpec& layer, Rng& rng) {
    Shape kshape = layer.kind == LayerSpec::kConvTranspose
                       ? Shape{layer.in_channels, layer.out_channels, layer.kernel, layer.kernel}
                       : Shape{layer.out_channels, layer.in_channels, layer.kernel, layer.kernel};
    params.add(layer.name + ".weight", Tensor::gaussian(kshape, rng, 0.0, kInitStddev, true));
    params.add(layer.name + ".bias", Tensor::zeros({layer.out_channels}, true));
    if (layer.batchnorm) {
        params.add(layer.name + ".bn_gamma", Tensor::full({layer.out_channels}, 1.0f, true));
        params.add(layer.name + ".bn_beta", Tensor::zeros({layer.out_channels}, true));
        params.add(layer.name + ".bn_mean", Tensor::zeros({layer.out_channels}));
        params.add(layer.name + ".bn_var", Tensor::full({layer.out_channels}, 1.0f));
    }
}

void add_linear_params(ParameterSet& params, const LayerSpec& layer, Rng& rng) {
    params.add(layer.name + ".weight",
               Tensor::gaussian({layer.out_channels, layer.in_channels}, rng, 0.0, kInitStddev,
                                true));
    params.add(layer.name + ".bias", Tensor::zeros({layer.out_channels}, true));
}

ParameterSet init_parameters(const NetworkSpec& spec, Rng& rng) {
    ParameterSet params;
    for (const LayerSpec& layer : spec.layers) {
        switch (layer.kind) {
            case LayerSpec::kConv:
            case LayerSpec::kConvTranspose:
                add_conv_params(params, layer, rng);
                break;
            case LayerSpec::kLinear:
                add_linear_params(params, layer, rng);
                break;
            default:
                break;
        }
    }
    return params;
}

}  // namespace

void ParameterSet::add(std::string name, Tensor tensor) {
    if (find(name)) throw ValueError("duplicate parameter name: " + name);
    entries_.emplace_back(std::move(name), std::move(tensor));
}

Tensor* ParameterSet::find(const std::string& name) {
    for (auto& [key, value] : entries_) {
        if (key == name) return &value;
    }
    return nullptr;
}

const Tensor* ParameterSet::find(const std::string& name) const {
    for (const auto& [key, value] : entries_) {
        if (key == name) return &value;
    }
    return nullptr;
}

Tensor& ParameterSet::at(const std::string& name) {
    Tensor* t = find(name);
    if (!t) throw ValueError("unknown parameter: " + name);
    return *t;
}

const Tensor& ParameterSet::at(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw ValueError("unknown parameter: " + name);
    return *t;
}

Network build_unet_generator(int resolution, Rng& rng, int in_channels, int out_channels,
                             int base_filters, int depth) {
    if (depth < 2) throw ValueError("generator depth must be >= 2, got " + std::to_string(depth));
    check_resolution(resolution, depth, "generator");
    NetworkSpec spec;
    spec.resolution = resolution;
    spec.input_channels = in_channels;
    spec.output_shape = {out_channels, resolution, resolution};

    for (int i = 0; i < depth; ++i) {
        LayerSpec layer;
        layer.name = "enc" + std::to_string(i);
        layer.kind = LayerSpec::kConv;
        layer.in_channels = i == 0 ? in_channels : width_at(base_filters, i - 1);
        layer.out_channels = width_at(base_filters, i);
        layer.kernel = 4;
        layer.stride = 2;
        layer.padding = 1;
        // First block sees raw input, innermost block may reach 1x1: no
        // batch statistics in either position.
        layer.batchnorm = i != 0 && i != depth - 1;
        layer.activation = LayerSpec::kLeakyRelu;
        spec.layers.push_back(layer);
    }
    for (int j = 0; j < depth; ++j) {
        LayerSpec layer;
        layer.name = "dec" + std::to_string(j);
        layer.kind = LayerSpec::kConvTranspose;
        const int mirror = depth - 1 - j;  // encoder level whose scale this layer restores
        layer.in_channels =
            j == 0 ? width_at(base_filters, depth - 1) : 2 * width_at(base_filters, mirror);
        layer.out_channels = j == depth - 1 ? out_channels : width_at(base_filters, mirror - 1);
        layer.kernel = 4;
        layer.stride = 2;
        layer.padding = 1;
        layer.batchnorm = j != depth - 1;
        layer.activation = j == depth - 1 ? LayerSpec::kTanh : LayerSpec::kRelu;
        if (j > 0) layer.concat_with = mirror;  // encoder index `mirror` in layer list
        spec.layers.push_back(layer);
    }
    Network net;
    net.spec = std::move(spec);
    net.params = init_parameters(net.spec, rng);
    return net;
}

Network build_discriminator(int resolution, Rng& rng, int condition_channels,
                            int candidate_channels, int base_filters) {
    const int depth = log2_int(resolution) - 1;  // stride-2 stack down to 2x2
    if (depth < 1) throw ValueError("discriminator needs resolution >= 4");
    check_resolution(resolution, depth, "discriminator");
    NetworkSpec spec;
    spec.resolution = resolution;
    spec.input_channels = condition_channels + candidate_channels;
    spec.output_shape = {1};

    for (int i = 0; i < depth; ++i) {
        LayerSpec layer;
        layer.name = "d" + std::to_string(i);
        layer.kind = LayerSpec::kConv;
        layer.in_channels = i == 0 ? spec.input_channels : width_at(base_filters, i - 1);
        layer.out_channels = width_at(base_filters, i);
        layer.kernel = 4;
        layer.stride = 2;
        layer.padding = 1;
        layer.batchnorm = i != 0;
        layer.activation = LayerSpec::kLeakyRelu;
        spec.layers.push_back(layer);
    }
    LayerSpec flatten;
    flatten.name = "flatten";
    flatten.kind = LayerSpec::kFlatten;
    spec.layers.push_back(flatten);

    LayerSpec fc;
    fc.name = "fc";
    fc.kind = LayerSpec::kLinear;
    fc.in_channels = width_at(base_filters, depth - 1) * 2 * 2;
    fc.out_channels = 1;
    fc.activation = LayerSpec::kSigmoid;
    spec.layers.push_back(fc);

    Network net;
    net.spec = std::move(spec);
    net.params = init_parameters(net.spec, rng);
    return net;
}

Network build_classifier(int resolution, int num_classes, Rng& rng) {
    if (num_classes < 2) {
        throw ValueError("classifier needs num_classes >= 2, got " + std::to_string(num_classes));
    }
    if (resolution < 8 || resolution % 8 != 0) {
        throw ValueError("classifier resolution must be a positive multiple of 8, got " +
                         std::to_string(resolution));
    }
    NetworkSpec spec;
    spec.resolution = resolution;
    spec.input_channels = 3;
    spec.output_shape = {num_classes};

    const int widths[3] = {16, 32, 64};
    for (int i = 0; i < 3; ++i) {
        LayerSpec layer;
        layer.name = "c" + std::to_string(i);
        layer.kind = LayerSpec::kConv;
        layer.in_channels = i == 0 ? 3 : widths[i - 1];
        layer.out_channels = widths[i];
        layer.kernel = 4;
        layer.stride = 2;
        layer.padding = 1;
        layer.batchnorm = true;
        layer.activation = LayerSpec::kRelu;
        spec.layers.push_back(layer);
    }
    LayerSpec pool;
    pool.name = "pool";
    pool.kind = LayerSpec::kGlobalAvgPool;
    spec.layers.push_back(pool);

    LayerSpec fc;
    fc.name = "fc";
    fc.kind = LayerSpec::kLinear;
    fc.in_channels = 64;
    fc.out_channels = num_classes;
    spec.layers.push_back(fc);

    Network net;
    net.spec = std::move(spec);
    net.params = init_parameters(net.spec, rng);
    return net;
}

Tensor net_forward(const NetworkSpec& spec, ParameterSet& params, const Tensor& input,
                   const ForwardOptions& options) {
    if (input.rank() != 4 || input.dim(1) != spec.input_channels ||
        input.dim(2) != spec.resolution || input.dim(3) != spec.resolution) {
        throw ShapeError("network expects [N," + std::to_string(spec.input_channels) + "," +
                         std::to_string(spec.resolution) + "," + std::to_string(spec.resolution) +
                         "], got " + shape_str(input.shape()));
    }
    std::vector<Tensor> outputs(spec.layers.size());
    Tensor x = input;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& layer = spec.layers[i];
        try {
            if (layer.concat_with >= 0) {
                Tensor skip = outputs[static_cast<std::size_t>(layer.concat_with)];
                if (options.zero_skips) skip = Tensor::zeros(skip.shape());
                x = concat_channels(x, skip);
            }
            switch (layer.kind) {
                case LayerSpec::kConv:
                    x = conv2d(x, params.at(layer.name + ".weight"), params.at(layer.name + ".bias"),
                               layer.stride, layer.padding);
                    break;
                case LayerSpec::kConvTranspose:
                    x = conv2d_transpose(x, params.at(layer.name + ".weight"),
                                         params.at(layer.name + ".bias"), layer.stride,
                                         layer.padding);
                    break;
                case LayerSpec::kLinear:
                    x = linear(x, params.at(layer.name + ".weight"),
                               params.at(layer.name + ".bias"));
                    break;
                case LayerSpec::kFlatten:
                    x = flatten2d(x);
                    break;
                case LayerSpec::kGlobalAvgPool:
                    x = global_avg_pool(x);
                    break;
            }
            if (layer.batchnorm) {
                x = batchnorm2d(x, params.at(layer.name + ".bn_gamma"),
                                params.at(layer.name + ".bn_beta"),
                                params.at(layer.name + ".bn_mean"),
                                params.at(layer.name + ".bn_var"), options.training, kBnMomentum,
                                kBnEpsilon);
            }
            switch (layer.activation) {
                case LayerSpec::kRelu: x = relu(x); break;
                case LayerSpec::kLeakyRelu: x = leaky_relu(x); break;
                case LayerSpec::kSigmoid: x = sigmoid(x); break;
                case LayerSpec::kTanh: x = tanh(x); break;
                case LayerSpec::kNone: break;
            }
        } catch (const ShapeError& e) {
            throw ShapeError("layer " + layer.name + ": " + e.what());
        }
        outputs[i] = x;
    }
    return x;
}

std::int64_t parameter_count(const ParameterSet& params) {
    std::int64_t count = 0;
    for (const auto& [name, tensor] : params) {
        if (tensor.requires_grad()) count += tensor.numel();
    }
    return count;
}

}  // namespace xmgc
