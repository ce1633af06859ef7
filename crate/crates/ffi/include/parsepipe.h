/* C API for the parsepipe packet-parser pipeline compiler and simulator.
 *
 * Every fallible call returns a pp_status; on failure pp_last_error() holds
 * a message for the calling thread. Strings returned through `char **out`
 * parameters are owned by the caller and must be released with
 * pp_string_free(). Handles are freed with their matching pp_*_free().
 *
 * Maintained by hand alongside crates/ffi/src/lib.rs.
 */

#ifndef PARSEPIPE_H
#define PARSEPIPE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum pp_status {
  PP_OK = 0,
  PP_ERR_NULL_ARG = 1,
  PP_ERR_UTF8 = 2,
  PP_ERR_LOAD = 3,
  PP_ERR_COMPILE = 4,
  PP_ERR_SIM = 5,
  PP_ERR_JSON = 6,
  PP_ERR_PANIC = 7,
} pp_status;

/* Opaque handles. */
typedef struct PpGraph PpGraph;
typedef struct PpPlan PpPlan;
typedef struct PpPipeline PpPipeline;

/* Message for the most recent error on this thread, or NULL. Owned by the
 * library; do not free. */
const char *pp_last_error(void);

/* Frees a string returned by this library. */
void pp_string_free(char *s);

/* Parses and validates a parser specification (JSON). */
pp_status pp_graph_load(const char *spec_json, PpGraph **out);
void pp_graph_free(PpGraph *g);

/* Renders "original", "reduced" or "balanced" as Graphviz DOT. */
pp_status pp_graph_dot(const PpGraph *g, const char *stage, char **out);

/* Compiles a graph into a pipeline plan for the given bus width (bits,
 * multiple of 8). */
pp_status pp_plan_build(const PpGraph *g, uint32_t bus_width_bits, PpPlan **out);

/* Plan artifact (de)serialization. */
pp_status pp_plan_from_json(const char *plan_json, PpPlan **out);
pp_status pp_plan_to_json(const PpPlan *p, char **out);

uint32_t pp_plan_depth_cycles(const PpPlan *p);
uint32_t pp_plan_bus_width_bits(const PpPlan *p);
void pp_plan_free(PpPlan *p);

/* Cycle-accurate simulator instance over a plan. Single-threaded; create
 * one per worker. */
pp_status pp_pipeline_new(const PpPlan *p, PpPipeline **out);

/* Parses one packet; returns the PHV stream as JSON lines:
 *   {"packet_id":..,"header":..,"bits_hex":..,"bit_count":..,"valid":..}
 */
pp_status pp_pipeline_parse(PpPipeline *sim, const uint8_t *bytes, size_t len,
                            char **out_phv_jsonl);
void pp_pipeline_free(PpPipeline *sim);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* PARSEPIPE_H */
