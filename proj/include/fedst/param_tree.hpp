#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "fedst/tensor.hpp"

namespace fedst {

enum class ParamRole { Shared, Private };

/// Named map of trainable tensors, each tagged Shared or Private. The two
/// role sets are disjoint and together cover every entry by construction.
/// Iteration order is the lexicographic path order, which makes snapshots,
/// serialization and aggregation deterministic.
class ParamTree {
public:
    using ValueMap = std::map<std::string, std::vector<double>>;

    void insert(const std::string& path, Tensor t, ParamRole role) {
        if (params_.count(path)) throw ContractError("duplicate parameter path: " + path);
        params_.emplace(path, std::move(t));
        roles_.emplace(path, role);
    }

    bool contains(const std::string& path) const { return params_.count(path) != 0; }

    Tensor& at(const std::string& path) {
        auto it = params_.find(path);
        if (it == params_.end()) throw ContractError("no parameter at path: " + path);
        return it->second;
    }
    const Tensor& at(const std::string& path) const {
        auto it = params_.find(path);
        if (it == params_.end()) throw ContractError("no parameter at path: " + path);
        return it->second;
    }

    ParamRole role(const std::string& path) const {
        auto it = roles_.find(path);
        if (it == roles_.end()) throw ContractError("no parameter at path: " + path);
        return it->second;
    }

    std::map<std::string, Tensor>& entries() { return params_; }
    const std::map<std::string, Tensor>& entries() const { return params_; }

    std::size_t size() const { return params_.size(); }

    std::vector<std::string> paths() const {
        std::vector<std::string> out;
        out.reserve(params_.size());
        for (const auto& [p, t] : params_) out.push_back(p);
        return out;
    }

    std::set<std::string> paths_with_role(ParamRole role) const {
        std::set<std::string> out;
        for (const auto& [p, r] : roles_)
            if (r == role) out.insert(p);
        return out;
    }
    std::set<std::string> shared_paths() const { return paths_with_role(ParamRole::Shared); }
    std::set<std::string> private_paths() const { return paths_with_role(ParamRole::Private); }

    /// Detached value copies of every parameter with the given role.
    ValueMap snapshot(ParamRole role) const {
        ValueMap out;
        for (const auto& [p, t] : params_)
            if (roles_.at(p) == role) out.emplace(p, t.data());
        return out;
    }

    ValueMap snapshot_all() const {
        ValueMap out;
        for (const auto& [p, t] : params_) out.emplace(p, t.data());
        return out;
    }

    /// Overwrite parameter values in place. Every path in `values` must exist
    /// and match its tensor's length; gradients are untouched.
    void load(const ValueMap& values) {
        for (const auto& [p, v] : values) {
            Tensor& t = at(p);
            if (v.size() != t.data().size())
                throw DimensionError("load: size mismatch at " + p);
            t.data() = v;
        }
    }

    void zero_grad() {
        for (auto& [p, t] : params_) t.zero_grad();
    }

    /// Deep copy: fresh storage, same values, roles and requires_grad flags.
    ParamTree clone() const {
        ParamTree out;
        for (const auto& [p, t] : params_) out.insert(p, t.clone(), roles_.at(p));
        return out;
    }

    /// Re-tag paths: entries matched by `private_set` become Private, the
    /// rest Shared. Used for partition experiments and the all-shared mode.
    void repartition(const std::set<std::string>& private_set) {
        for (auto& [p, r] : roles_)
            r = private_set.count(p) ? ParamRole::Private : ParamRole::Shared;
    }

    bool values_equal(const ParamTree& other) const {
        if (params_.size() != other.params_.size()) return false;
        auto it = other.params_.begin();
        for (const auto& [p, t] : params_) {
            if (it->first != p || it->second.data() != t.data()) return false;
            ++it;
        }
        return true;
    }

private:
    std::map<std::string, Tensor> params_;
    std::map<std::string, ParamRole> roles_;
};

} // namespace fedst
