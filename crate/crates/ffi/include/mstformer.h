#ifndef MSTFORMER_H
#define MSTFORMER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum MstfStatus {
  MSTF_STATUS_OK = 0,
  MSTF_STATUS_NULL_POINTER = 1,
  // Output buffer too small, bad UTF-8 path or similar caller error.
  MSTF_STATUS_INVALID_ARGUMENT = 2,
  MSTF_STATUS_IO = 3,
  MSTF_STATUS_FORMAT = 4,
  MSTF_STATUS_SHAPE = 5,
  MSTF_STATUS_DOMAIN = 6,
  MSTF_STATUS_CONFIG = 7,
  MSTF_STATUS_INTERNAL = 8,
  MSTF_STATUS_PANIC = 9,
} MstfStatus;

// Loaded checkpoint. Opaque to C.
typedef struct MstfModel MstfModel;

// One AIS fix. `t_unix` is seconds since the Unix epoch; speed in knots,
// course and heading in degrees.
typedef struct MstfPoint {
  int64_t t_unix;
  double lon;
  double lat;
  double sog;
  double cog;
  double heading;
} MstfPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *mstf_last_error(void);

// Meridional-plane earth radius in metres at `lat_deg`.
//
// # Safety
// `out` must be null or valid for one write.
enum MstfStatus mstf_earth_radius(double lat_deg, double *out);

// Great-circle distance in km.
//
// # Safety
// `out_km` must be null or valid for one write.
enum MstfStatus mstf_haversine_km(double lon1,
                                  double lat1,
                                  double lon2,
                                  double lat2,
                                  double *out_km);

// Position after `dt_s` seconds at speed `sog` knots on course `cog` degrees.
//
// # Safety
// `out_lon` and `out_lat` must be null or valid for one write each.
enum MstfStatus mstf_propagate(double lon,
                               double lat,
                               double sog,
                               double cog,
                               double dt_s,
                               double *out_lon,
                               double *out_lat);

// Side length of the ATM grid rendered by [`mstf_atm`].
size_t mstf_atm_size(void);

// Renders the ATM for one step with the default settings, row-major into
// `out`, which must hold `mstf_atm_size()` squared values.
//
// # Safety
// `point` and `next` must be null or point to valid fixes; `out` must be null
// or valid for `out_len` writes.
enum MstfStatus mstf_atm(const struct MstfPoint *point,
                         const struct MstfPoint *next,
                         double *out,
                         size_t out_len);

// Loads a checkpoint written by `mstformer train`.
//
// # Safety
// `path` must be null or a NUL-terminated string; `out` must be null or valid
// for one write. Release the model with [`mstf_model_free`].
enum MstfStatus mstf_model_load(const char *path, struct MstfModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must be null or come from [`mstf_model_load`] and not be freed twice.
void mstf_model_free(struct MstfModel *model);

// Fixes a forecast needs: encoder length plus one.
//
// # Safety
// `model` must be null or a live model; null yields 0.
size_t mstf_model_history_len(const struct MstfModel *model);

// Forecast steps produced per call; null yields 0.
//
// # Safety
// `model` must be null or a live model.
size_t mstf_model_horizon_len(const struct MstfModel *model);

// Forecasts (lon, lat) pairs from `history_len` evenly spaced fixes.
//
// Writes `2 * mstf_model_horizon_len(model)` values to `out_lonlat`,
// interleaved lon, lat. `seed` drives the sparse attention key sampling.
//
// # Safety
// `model` must be null or a live model, `history` null or valid for
// `history_len` reads, `out_lonlat` null or valid for `out_len` writes.
enum MstfStatus mstf_model_forecast(const struct MstfModel *model,
                                    const struct MstfPoint *history,
                                    size_t history_len,
                                    uint64_t seed,
                                    double *out_lonlat,
                                    size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSTFORMER_H */
