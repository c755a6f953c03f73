/* duap — Doubly-Universal Adversarial Perturbation toolkit, C API.
 *
 * The core is C++; this header is the stable surface for the CLI and other
 * consumers. Objects are opaque handles, every call returns a status code,
 * and the last error message is kept per thread.
 */
#ifndef DUAP_H
#define DUAP_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum duap_status {
    DUAP_OK = 0,
    DUAP_E_CONFIG = 1,
    DUAP_E_DATA = 2,
    DUAP_E_SHAPE = 3,
    DUAP_E_RANGE = 4,
    DUAP_E_FORMAT = 5,
    DUAP_E_LABELS = 6,
    DUAP_E_GRID = 7,
    DUAP_E_LAYER = 8,
    DUAP_E_CONTRACT = 9,
    DUAP_E_INTERNAL = 10
} duap_status;

/* "E_CONFIG", "E_DATA", ... (static storage) */
const char* duap_status_name(duap_status status);

/* message from the most recent failing call on this thread; never NULL */
const char* duap_last_error(void);

const char* duap_version(void);

/* strings returned through char** outputs are released with this */
void duap_string_free(char* s);

/* --- encoder handles ---------------------------------------------------- */

typedef struct duap_encoder duap_encoder;

/* config_json: {"image_resolution":..,"patch_size":..,"num_layers":..,
 * "num_heads":..,"embed_dim":..,"mlp_ratio":..,"norm_mean":[..],"norm_std":[..]}
 * Missing fields take the toy defaults. */
duap_status duap_encoder_build(const char* config_json, uint64_t seed, duap_encoder** out);
duap_status duap_encoder_load(const char* path, duap_encoder** out);
duap_status duap_encoder_save(const duap_encoder* encoder, const char* path);
duap_status duap_encoder_config_json(const duap_encoder* encoder, char** json_out);
/* embedding of one image file (decoded + preprocessed); embedding_out must
 * hold embed_dim doubles */
duap_status duap_encoder_embed_image(const duap_encoder* encoder, const char* image_path,
                                     double* embedding_out, size_t embedding_len);
void duap_encoder_free(duap_encoder* encoder);

/* --- perturbation handles ------------------------------------------------ */

typedef struct duap_uap duap_uap;

duap_status duap_uap_load(const char* path, duap_uap** out);
duap_status duap_uap_save(const duap_uap* uap, const char* path);
duap_status duap_uap_info_json(const duap_uap* uap, char** json_out);
duap_status duap_uap_render_png(const duap_uap* uap, const char* path);
void duap_uap_free(duap_uap* uap);

/* --- commands ------------------------------------------------------------ */
/* JSON run configurations; see the README for schemas. out_dir may be NULL
 * or empty to use the config's out_dir. */

duap_status duap_cmd_train(const char* config_json, const char* out_dir);
duap_status duap_cmd_eval(const char* config_json, const char* out_dir);
duap_status duap_cmd_ablate(const char* config_json, const char* out_dir);
duap_status duap_cmd_visualize(const char* config_json, const char* out_dir);
/* header dump of a weights/UAP/DIMG file as JSON */
duap_status duap_cmd_inspect(const char* path, char** json_out);
/* resolved train defaults as JSON */
duap_status duap_default_train_config(char** json_out);

#ifdef __cplusplus
}
#endif

#endif /* DUAP_H */
