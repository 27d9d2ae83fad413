#include "revprag/tokenizer.hpp"

#include "revprag/corpus.hpp"
#include "revprag/error.hpp"

#include <algorithm>
#include <set>

namespace revprag {

namespace {

const std::vector<std::string> specials = {"<pad>", "<bos>", "<eos>", "<unk>"};

} // namespace

Tokenizer::Tokenizer() : Tokenizer(std::vector<std::string>{}) {}

Tokenizer::Tokenizer(std::vector<std::string> words)
{
    words_ = specials;
    for (auto& w : words) {
        if (std::find(specials.begin(), specials.end(), w) != specials.end())
            continue;
        words_.push_back(std::move(w));
    }
    for (std::size_t i = 0; i < words_.size(); ++i)
        if (!ids_.emplace(words_[i], static_cast<TokenId>(i)).second)
            throw Error("tokenizer: duplicate word " + words_[i]);
}

std::vector<std::string> unique_sorted_words(std::span<const std::string> texts)
{
    std::set<std::string> seen;
    for (const auto& t : texts)
        for (auto& w : split_words(t))
            seen.insert(std::move(w));
    return {seen.begin(), seen.end()};
}

TokenId Tokenizer::id(std::string_view word) const
{
    const auto it = ids_.find(std::string(word));
    return it == ids_.end() ? unk : it->second;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const
{
    std::vector<TokenId> out;
    for (const auto& w : split_words(text))
        out.push_back(id(w));
    return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const
{
    std::string out;
    for (TokenId t : ids) {
        if (t < 4)
            continue;
        if (!out.empty())
            out += ' ';
        out += word(t);
    }
    return out;
}

} // namespace revprag
