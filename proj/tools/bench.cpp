// Throughput check for the convolution path: times forward and
// forward+backward over the layer shapes a 64x64 translation run exercises,
// and reports effective GFLOP/s per layer.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <vector>

#include "xmgc/ops.hpp"
#include "xmgc/rng.hpp"
#include "xmgc/tensor.hpp"

using namespace xmgc;

namespace {

struct LayerShape {
    int cin, cout, h, w, stride;
};

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace

int main(int argc, char** argv) {
    int reps = argc > 1 ? std::atoi(argv[1]) : 20;
    Rng rng(7, static_cast<std::uint64_t>(RngStream::Test));

    // encoder + decoder shapes of the depth-5 generator plus discriminator.
    std::vector<LayerShape> layers = {
        {3, 64, 64, 64, 2},    {64, 128, 32, 32, 2},  {128, 256, 16, 16, 2},
        {256, 512, 8, 8, 2},   {512, 512, 4, 4, 2},   {1024, 256, 8, 8, 2},
        {512, 128, 16, 16, 2}, {256, 64, 32, 32, 2},  {6, 64, 64, 64, 2},
        {512, 512, 4, 4, 2},
    };

    double total_flop = 0.0, total_fwd = 0.0, total_train = 0.0;
    for (const auto& L : layers) {
        Tensor x = Tensor::gaussian({1, L.cin, L.h, L.w}, rng, 0.0, 1.0, true);
        Tensor k = Tensor::gaussian({L.cout, L.cin, 4, 4}, rng, 0.0, 0.02, true);
        Tensor b = Tensor::zeros({L.cout}, true);
        int ho = (L.h + 2 - 4) / L.stride + 1;
        double flop = 2.0 * L.cout * ho * ho * L.cin * 16;

        double t0 = now_s();
        for (int r = 0; r < reps; ++r) {
            Tensor y = conv2d(x, k, b, L.stride, 1);
        }
        double fwd = (now_s() - t0) / reps;

        t0 = now_s();
        for (int r = 0; r < reps; ++r) {
            Tape tape;
            Tape::Scope scope(tape);
            Tensor y = conv2d(x, k, b, L.stride, 1);
            Tensor loss = mean(y);
            tape.backward(loss);
            x.clear_grad();
            k.clear_grad();
            b.clear_grad();
        }
        double train = (now_s() - t0) / reps;

        std::printf("conv %4d->%4d @%3dx%-3d fwd %8.3f ms (%6.2f GF/s)  fwd+bwd %8.3f ms (%6.2f GF/s)\n",
                    L.cin, L.cout, L.h, L.w, fwd * 1e3, flop / fwd * 1e-9, train * 1e3,
                    3.0 * flop / train * 1e-9);
        total_flop += flop;
        total_fwd += fwd;
        total_train += train;
    }
    std::printf("stack: fwd %.3f ms, fwd+bwd %.3f ms, ~%.2f GFLOP/s effective\n",
                total_fwd * 1e3, total_train * 1e3, 3.0 * total_flop / total_train * 1e-9);
    return 0;
}
