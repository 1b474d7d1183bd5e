// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/backend.hpp"

namespace clora {

PromptEmbedding DenoiserBackend::encode_prompt(const PromptVariant& variant, const LoRASet& loras) {
    PromptEmbedding e = encode_text(variant.text, loras);
    e.variant_id = variant.variant_id;
    return e;
}

}  // namespace clora
