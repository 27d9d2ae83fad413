#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace revprag {

using TokenId = std::int32_t;

// Closed whitespace vocabulary. Ids 0..3 are the special tokens, words
// follow in lexicographic order.
class Tokenizer {
public:
    static constexpr TokenId pad = 0;
    static constexpr TokenId bos = 1;
    static constexpr TokenId eos = 2;
    static constexpr TokenId unk = 3;

    Tokenizer();
    explicit Tokenizer(std::vector<std::string> words);

    template <typename Range>
    static Tokenizer build(const Range& texts);

    std::vector<TokenId> encode(std::string_view text) const;
    // Special tokens are skipped.
    std::string decode(std::span<const TokenId> ids) const;

    TokenId id(std::string_view word) const;
    const std::string& word(TokenId id) const { return words_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const { return words_.size(); }
    // Words after the special tokens, in id order.
    std::span<const std::string> vocabulary() const { return std::span(words_).subspan(4); }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, TokenId> ids_;
};

std::vector<std::string> unique_sorted_words(std::span<const std::string> texts);

template <typename Range>
Tokenizer Tokenizer::build(const Range& texts)
{
    std::vector<std::string> all(std::begin(texts), std::end(texts));
    return Tokenizer(unique_sorted_words(all));
}

} // namespace revprag
