#pragma once

#include <cstdint>
#include <vector>

#include "asymtok/common.hpp"

namespace asymtok {

// One element of the model input stream. Vision tokens carry a projected
// embedding, text tokens carry a vocabulary id. Position ids are absolute and
// survive pruning so that a pruned sequence embeds identically to the kept
// rows of the full sequence.
struct Token {
    Modality modality = Modality::Text;
    std::vector<float> embedding;  // vision only, length = hidden_dim
    int token_id = -1;             // text only
    int position_id = 0;
    Phase phase = Phase::Prefill;
    int turn_id = 0;

    static Token vision(std::vector<float> emb, int position, int turn = 0) {
        Token t;
        t.modality = Modality::Vision;
        t.embedding = std::move(emb);
        t.position_id = position;
        t.turn_id = turn;
        return t;
    }

    static Token text(int id, int position, Phase phase = Phase::Prefill, int turn = 0) {
        Token t;
        t.modality = Modality::Text;
        t.token_id = id;
        t.position_id = position;
        t.phase = phase;
        t.turn_id = turn;
        return t;
    }
};

struct TokenSequence {
    std::vector<Token> entries;

    size_t size() const { return entries.size(); }

    size_t vision_count() const {
        size_t n = 0;
        for (const auto& t : entries) n += (t.modality == Modality::Vision);
        return n;
    }

    size_t text_count() const { return entries.size() - vision_count(); }

    std::vector<size_t> vision_indices() const {
        std::vector<size_t> idx;
        for (size_t i = 0; i < entries.size(); ++i)
            if (entries[i].modality == Modality::Vision) idx.push_back(i);
        return idx;
    }

    std::vector<size_t> text_indices() const {
        std::vector<size_t> idx;
        for (size_t i = 0; i < entries.size(); ++i)
            if (entries[i].modality == Modality::Text) idx.push_back(i);
        return idx;
    }

    // Checks the structural invariants: strictly increasing positions and,
    // within each turn, no vision token after a text token.
    void validate() const {
        int last_pos = -1;
        int last_turn = -1;
        bool text_seen_in_turn = false;
        for (const auto& t : entries) {
            if (t.position_id <= last_pos)
                throw InputError("TokenSequence: position_ids must be strictly increasing");
            last_pos = t.position_id;
            if (t.turn_id != last_turn) {
                last_turn = t.turn_id;
                text_seen_in_turn = false;
            }
            if (t.modality == Modality::Text) text_seen_in_turn = true;
            else if (text_seen_in_turn)
                throw InputError("TokenSequence: vision tokens must precede text within a turn");
        }
    }
};

}  // namespace asymtok
