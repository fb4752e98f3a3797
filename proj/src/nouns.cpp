#include "yearspan/nouns.hpp"

#include <array>

namespace yearspan {

namespace {

constexpr std::array<std::string_view, 120> k_event_nouns = {
    "abduction", "accord", "affair", "agreement", "appraisal", "assaults", "assessment", "attack",
    "attempts", "campaign", "captivity", "case", "challenge", "chaos", "clash", "collaboration", "coma",
    "competition", "confrontation", "consequence", "conspiracy", "construction", "consultation", "contact",
    "contract", "convention", "cooperation", "custody", "deal", "decline", "decrease", "demonstrations",
    "development", "disagreement", "disorder", "dispute", "domination", "dynasty", "effect", "effort",
    "employment", "endeavor", "engagement", "epidemic", "evaluation", "exchange", "existence", "expansion",
    "expedition", "experiments", "fall", "fame", "flights", "friendship", "growth", "hardship", "hostility",
    "illness", "impact", "imprisonment", "improvement", "incarceration", "increase", "insurgency",
    "invasion", "investigation", "journey", "kingdom", "marriage", "modernization", "negotiation",
    "notoriety", "obstruction", "operation", "order", "outbreak", "outcome", "overhaul", "patrols",
    "pilgrimage", "plague", "plan", "practice", "process", "program", "progress", "project", "pursuit",
    "quest", "raids", "reforms", "reign", "relationship", "retaliation", "riot", "rise", "rivalry",
    "romance", "rule", "sanctions", "shift", "siege", "slump", "stature", "stint", "strikes", "study",
    "test", "testing", "tests", "therapy", "tour", "tradition", "treaty", "trial", "trip", "unemployment",
    "voyage", "warfare", "work",
};

constexpr std::array<std::string_view, 20> k_luxury_nouns = {
    "gem", "necklace", "watch", "ring", "suitcase", "scarf", "suit", "shirt", "sweater", "dress", "fridge",
    "TV", "bed", "bike", "lamp", "table", "chair", "painting", "sculpture", "plant",
};

}  // namespace

std::span<const std::string_view> event_nouns() { return k_event_nouns; }
std::span<const std::string_view> luxury_nouns() { return k_luxury_nouns; }

}  // namespace yearspan
