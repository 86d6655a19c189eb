#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mango/flow.hpp"

namespace mango {

struct AuditReport {
  std::string name;
  std::string kind;
  std::size_t n = 0, d = 0;
  std::uint64_t seed = 0;
  double roundtrip_err = 0.0;
  bool logdet_checked = false;
  double logdet_analytic = 0.0;
  double logdet_numeric = 0.0;
  double rel_err = 0.0;
  bool passed = false;

  nlohmann::json to_json() const;
};

/// A bijection over [B, n, d] batches with its per-sample log-det.
struct Bijection {
  std::function<LayerResult(const Tensor&)> forward;
  std::function<Tensor(const Tensor&)> inverse;
};

/// Round trip on the batch x, then (when check_logdet) the analytic log-det
/// of x's first sample against the slogdet of its numerical Jacobian.
/// Passes iff roundtrip_err < 1e-6 and rel_err < 1e-3.
AuditReport audit_bijection(const Bijection& f, const Tensor& x, bool check_logdet);
AuditReport audit_layer(FlowLayer& layer, const Tensor& x, bool check_logdet = true);
AuditReport audit_model(FlowModel& model, const Tensor& x, bool check_logdet = true);

/// Relative error used by audits; logs near zero are compared absolutely.
double logdet_rel_err(double analytic, double numeric);

struct VerifyOptions {
  std::size_t seeds = 20;
  std::uint64_t base_seed = 0;
  std::vector<std::size_t> token_counts{2, 4, 8, 16};
  std::vector<std::size_t> widths{2, 4};
  std::vector<std::size_t> model_blocks{1, 2};
  double layer_jitter = 0.1;     // sd added to single-layer parameters
  double coupling_jitter = 0.05; // sd added to couplings inside models
  bool inject_fault = false;  // doubles every analytic log-det
};

struct VerifyReport {
  std::vector<AuditReport> audits;
  nlohmann::json exponent;  // verdict on the ICA log-det exponent
  double seconds = 0.0;

  bool passed() const;
  std::size_t failures() const;
  nlohmann::json to_json() const;
};

using AuditSink = std::function<void(const AuditReport&)>;

/// Every layer kind, partition scheme and end-to-end model over the grid.
VerifyReport run_verify(const VerifyOptions& options, const AuditSink& sink = {});

}  // namespace mango
