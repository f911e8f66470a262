#include "xmgc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace xmgc {

GradcheckReport gradcheck(const GradcheckProblem& problem, double tolerance, std::uint64_t seed,
                          double step) {
    Rng rng(seed, static_cast<std::uint64_t>(RngStream::Gradcheck));
    std::vector<Tensor> params;
    params.reserve(problem.param_shapes.size());
    for (const Shape& shape : problem.param_shapes) {
        params.push_back(Tensor::uniform(shape, rng, -1.0, 1.0, true));
    }
    if (problem.init) problem.init(params, rng);
    for (Tensor& p : params) p.set_requires_grad(true);

    std::vector<std::vector<float>> analytic;
    {
        Tape tape;
        Tape::Scope scope(tape);
        Tensor loss = problem.build(params);
        tape.backward(loss);
    }
    for (Tensor& p : params) {
        if (p.has_grad()) {
            analytic.emplace_back(p.grad().begin(), p.grad().end());
        } else {
            analytic.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
        }
        p.clear_grad();
    }

    GradcheckReport report;
    report.problem = problem.name;
    report.pass = true;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto vals = params[pi].mutable_values();
        const std::int64_t count = params[pi].numel();
        double norm_a = 0.0, norm_n = 0.0, norm_d = 0.0;
        for (std::int64_t j = 0; j < count; ++j) {
            const float orig = vals[j];
            vals[j] = static_cast<float>(static_cast<double>(orig) + step);
            const double hi = vals[j];
            const double f_hi = problem.build(params).item64();
            vals[j] = static_cast<float>(static_cast<double>(orig) - step);
            const double lo = vals[j];
            const double f_lo = problem.build(params).item64();
            vals[j] = orig;
            const double numeric = (f_hi - f_lo) / (hi - lo);
            const double a = analytic[pi][static_cast<std::size_t>(j)];
            norm_a += a * a;
            norm_n += numeric * numeric;
            norm_d += (a - numeric) * (a - numeric);
        }
        const double denom = std::max({std::sqrt(norm_a), std::sqrt(norm_n), 1e-8});
        const double rel = std::sqrt(norm_d) / denom;
        if (rel > report.worst_rel_error) {
            report.worst_rel_error = rel;
            report.worst_param = static_cast<int>(pi);
        }
        if (rel > tolerance) report.pass = false;
    }
    return report;
}

}  // namespace xmgc
