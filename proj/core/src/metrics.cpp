#include "asymtok/metrics.hpp"

#include <limits>

namespace asymtok {

void CostModel::validate() const {
    if (hidden_dim < 1 || ffn_dim < 1 || num_layers < 1 || num_heads < 1 ||
        bytes_per_element < 1)
        throw ConfigError("CostModel: all fields must be positive");
    if (hidden_dim % num_heads != 0)
        throw ConfigError("CostModel: head_dim * num_heads must equal hidden_dim");
}

CostModel CostModel::from_config(const ModelConfig& config, int bytes_per_element) {
    CostModel m;
    m.hidden_dim = config.hidden_dim;
    m.ffn_dim = config.ffn_dim;
    m.num_layers = config.num_layers;
    m.num_heads = config.num_heads;
    m.bytes_per_element = bytes_per_element;
    m.validate();
    return m;
}

namespace {

uint64_t checked(unsigned __int128 v, const char* what) {
    if (v > std::numeric_limits<uint64_t>::max())
        throw InputError(std::string(what) + ": value overflows 64 bits");
    return static_cast<uint64_t>(v);
}

}  // namespace

uint64_t flops_per_layer(uint64_t n, const CostModel& model) {
    if (n < 1) throw InputError("flops: sequence length must be >= 1");
    model.validate();
    const unsigned __int128 nn = n;
    const unsigned __int128 d = static_cast<uint64_t>(model.hidden_dim);
    const unsigned __int128 m = static_cast<uint64_t>(model.ffn_dim);
    const unsigned __int128 total = 4 * nn * d * d + 2 * nn * nn * d + 3 * nn * d * m;
    return checked(total, "flops_per_layer");
}

uint64_t flops_total(uint64_t n, const CostModel& model) {
    const unsigned __int128 total =
        static_cast<unsigned __int128>(flops_per_layer(n, model)) *
        static_cast<uint64_t>(model.num_layers);
    return checked(total, "flops_total");
}

double flops_saved(uint64_t n_full, uint64_t n_kept, const CostModel& model) {
    if (n_kept < 1 || n_kept > n_full) throw InputError("flops_saved: need 1 <= n_kept <= n_full");
    return 1.0 - static_cast<double>(flops_per_layer(n_kept, model)) /
                     static_cast<double>(flops_per_layer(n_full, model));
}

uint64_t kv_bytes(uint64_t n, const CostModel& model) {
    model.validate();
    const unsigned __int128 total = static_cast<unsigned __int128>(n) *
                                    static_cast<uint64_t>(model.num_layers) * 2 *
                                    static_cast<uint64_t>(model.hidden_dim) *
                                    static_cast<uint64_t>(model.bytes_per_element);
    return checked(total, "kv_bytes");
}

UsageReport usage_report(uint64_t n_full, uint64_t n_kept, uint64_t peak_tokens,
                         const CostModel& model) {
    UsageReport r;
    r.flops_full = flops_total(n_full, model);
    r.flops_pruned = flops_total(n_kept, model);
    r.flops_saved = flops_saved(n_full, n_kept, model);
    r.kv_bytes_full = kv_bytes(n_full, model);
    r.kv_bytes_pruned = kv_bytes(n_kept, model);
    r.peak_token_count = peak_tokens;
    return r;
}

}  // namespace asymtok
