// Named parameter registry shared by models, optimizers, and checkpoints.
#pragma once

#include <string>
#include <vector>

#include "matssl/tensor.hpp"

namespace matssl {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

class ParamStore {
public:
    Tensor add(const std::string& name, Tensor t) {
        t.set_requires_grad(true);
        for (const auto& p : params_) {
            if (p.name == name) throw ValueError("duplicate parameter name '" + name + "'");
        }
        params_.push_back({name, t});
        return t;
    }

    std::vector<NamedParam>& entries() { return params_; }
    const std::vector<NamedParam>& entries() const { return params_; }

    Tensor find(const std::string& name) const {
        for (const auto& p : params_) {
            if (p.name == name) return p.tensor;
        }
        throw ValueError("unknown parameter '" + name + "'");
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    std::int64_t total_size() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.tensor.numel();
        return n;
    }

    // Tensor handles share storage, so the merged list aliases the originals.
    static std::vector<NamedParam> merge(std::initializer_list<const ParamStore*> stores) {
        std::vector<NamedParam> all;
        for (const auto* s : stores) {
            all.insert(all.end(), s->entries().begin(), s->entries().end());
        }
        return all;
    }

private:
    std::vector<NamedParam> params_;
};

// Kaiming-uniform fan-in draw (ReLU gain): bound = sqrt(6 / fan_in).
Tensor kaiming_uniform(Shape shape, std::int64_t fan_in, Rng& rng);

}  // namespace matssl
