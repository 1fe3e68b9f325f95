#pragma once

#include <stdexcept>
#include <string>

namespace kmslam {

/// Failure classes surfaced by the library. Each maps to one machine-parsable
/// name so callers (and the CLI) can react per class instead of per message.
enum class Errc {
  point_behind_camera,
  level_out_of_range,
  dead_id,
  empty_input,
  degenerate_directions,
  non_positive_side,
  bad_magic,
  unsupported_version,
  truncated_stream,
  degenerate_corners,
  no_convergence,
  insufficient_baseline,
  all_candidates_inconsistent,
  no_common_markers,
  insufficient_parallax,
  insufficient_constraints,
  diverged_solve,
  singular_system,
  empty_chain,
  invalid_config,
  unknown_scenario,
  degenerate_configuration,
  empty_subset,
  init_failed,
  io_error,
};

const char* errc_name(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message),
        code_(code) {}

  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace kmslam
