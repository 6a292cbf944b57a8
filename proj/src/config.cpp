#include "histoseg/config.hpp"

#include <functional>
#include <map>

#include "json.hpp"

namespace histoseg {

namespace {

using nlohmann::json;

int as_int(const json& v, const std::string& key) {
  if (!v.is_number_integer()) fail("config: key \"" + key + "\" expects an integer");
  return v.get<int>();
}

std::uint64_t as_u64(const json& v, const std::string& key) {
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0)) {
    fail("config: key \"" + key + "\" expects a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

double as_double(const json& v, const std::string& key) {
  if (!v.is_number()) fail("config: key \"" + key + "\" expects a number");
  return v.get<double>();
}

bool as_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) fail("config: key \"" + key + "\" expects true or false");
  return v.get<bool>();
}

std::string as_string(const json& v, const std::string& key) {
  if (!v.is_string()) fail("config: key \"" + key + "\" expects a string");
  return v.get<std::string>();
}

std::vector<BlockSpec> as_blocks(const json& v, const std::string& key) {
  if (!v.is_array()) fail("config: key \"" + key + "\" expects an array of block objects");
  std::vector<BlockSpec> blocks;
  for (const json& b : v) {
    if (!b.is_object()) fail("config: key \"" + key + "\" expects an array of block objects");
    BlockSpec blk;
    for (const auto& [k, val] : b.items()) {
      if (k == "base_out_channels") {
        blk.base_out_channels = as_int(val, key);
      } else if (k == "stride") {
        blk.stride = as_int(val, key);
      } else if (k == "dilation") {
        blk.dilation = as_int(val, key);
      } else if (k == "expansion") {
        blk.expansion = as_int(val, key);
      } else {
        fail("config: unknown block field \"" + k + "\" under \"" + key + "\"");
      }
    }
    blocks.push_back(blk);
  }
  return blocks;
}

json blocks_json(const std::vector<BlockSpec>& blocks) {
  json arr = json::array();
  for (const BlockSpec& b : blocks) {
    arr.push_back({{"base_out_channels", b.base_out_channels},
                   {"stride", b.stride},
                   {"dilation", b.dilation},
                   {"expansion", b.expansion}});
  }
  return arr;
}

struct FieldDef {
  std::function<void(RunConfig&, const json&, const std::string&)> set;
  std::function<json(const RunConfig&)> get;
};

// The dotted-key registry. std::map keeps known_keys() and to_json() in a
// stable, readable order.
const std::map<std::string, FieldDef>& fields() {
  static const std::map<std::string, FieldDef> defs = {
      {"data.dir",
       {[](RunConfig& c, const json& v, const std::string& k) { c.data_dir = as_string(v, k); },
        [](const RunConfig& c) { return json(c.data_dir); }}},
      {"loss.alpha",
       {[](RunConfig& c, const json& v, const std::string& k) { c.train.loss.alpha = as_double(v, k); },
        [](const RunConfig& c) { return json(c.train.loss.alpha); }}},
      {"loss.alpha_weighting",
       {[](RunConfig& c, const json& v, const std::string& k) {
          c.train.loss.alpha_weighting = as_bool(v, k);
        },
        [](const RunConfig& c) { return json(c.train.loss.alpha_weighting); }}},
      {"loss.clip_epsilon",
       {[](RunConfig& c, const json& v, const std::string& k) {
          c.train.loss.clip_epsilon = as_double(v, k);
        },
        [](const RunConfig& c) { return json(c.train.loss.clip_epsilon); }}},
      {"loss.dice_smoothing",
       {[](RunConfig& c, const json& v, const std::string& k) {
          c.train.loss.dice_smoothing = as_double(v, k);
        },
        [](const RunConfig& c) { return json(c.train.loss.dice_smoothing); }}},
      {"loss.gamma",
       {[](RunConfig& c, const json& v, const std::string& k) { c.train.loss.gamma = as_double(v, k); },
        [](const RunConfig& c) { return json(c.train.loss.gamma); }}},
      {"network.aspp_base_width",
       {[](RunConfig& c, const json& v, const std::string& k) {
          c.network.aspp_base_width = as_int(v, k);
        },
        [](const RunConfig& c) { return json(c.network.aspp_base_width); }}},
      {"network.blocks",
       {[](RunConfig& c, const json& v, const std::string& k) { c.network.blocks = as_blocks(v, k); },
        [](const RunConfig& c) { return blocks_json(c.network.blocks); }}},
      {"network.decoder_base_width",
       {[](RunConfig& c, const json& v, const std::string& k) {
          c.network.decoder_base_width = as_int(v, k);
        },
        [](const RunConfig& c) { return json(c.network.decoder_base_width); }}},
      {"network.dropout_rate",
       {[](RunConfig& c, const json& v, const std::string& k) {
          c.network.dropout_rate = as_double(v, k);
        },
        [](const RunConfig& c) { return json(c.network.dropout_rate); }}},
      {"network.encoder_decoder_residual",
       {[](RunConfig& c, const json& v, const std::string& k) {
          c.network.encoder_decoder_residual = as_bool(v, k);
        },
        [](const RunConfig& c) { return json(c.network.encoder_decoder_residual); }}},
      {"network.encoder_qa_after_block",
       {[](RunConfig& c, const json& v, const std::string& k) {
          c.network.encoder_qa_after_block = as_int(v, k);
        },
        [](const RunConfig& c) { return json(c.network.encoder_qa_after_block); }}},
      {"network.in_channels",
       {[](RunConfig& c, const json& v, const std::string& k) { c.network.in_channels = as_int(v, k); },
        [](const RunConfig& c) { return json(c.network.in_channels); }}},
      {"network.input_height",
       {[](RunConfig& c, const json& v, const std::string& k) { c.network.input_height = as_int(v, k); },
        [](const RunConfig& c) { return json(c.network.input_height); }}},
      {"network.input_width",
       {[](RunConfig& c, const json& v, const std::string& k) { c.network.input_width = as_int(v, k); },
        [](const RunConfig& c) { return json(c.network.input_width); }}},
      {"network.stem_base_width",
       {[](RunConfig& c, const json& v, const std::string& k) {
          c.network.stem_base_width = as_int(v, k);
        },
        [](const RunConfig& c) { return json(c.network.stem_base_width); }}},
      {"network.use_qa",
       {[](RunConfig& c, const json& v, const std::string& k) { c.network.use_qa = as_bool(v, k); },
        [](const RunConfig& c) { return json(c.network.use_qa); }}},
      {"network.width_multiplier",
       {[](RunConfig& c, const json& v, const std::string& k) {
          c.network.width_multiplier = as_double(v, k);
        },
        [](const RunConfig& c) { return json(c.network.width_multiplier); }}},
      {"out.dir",
       {[](RunConfig& c, const json& v, const std::string& k) { c.out_dir = as_string(v, k); },
        [](const RunConfig& c) { return json(c.out_dir); }}},
      {"train.adam_epsilon",
       {[](RunConfig& c, const json& v, const std::string& k) {
          c.train.adam_epsilon = as_double(v, k);
        },
        [](const RunConfig& c) { return json(c.train.adam_epsilon); }}},
      {"train.batch_size",
       {[](RunConfig& c, const json& v, const std::string& k) { c.train.batch_size = as_int(v, k); },
        [](const RunConfig& c) { return json(c.train.batch_size); }}},
      {"train.beta1",
       {[](RunConfig& c, const json& v, const std::string& k) { c.train.beta1 = as_double(v, k); },
        [](const RunConfig& c) { return json(c.train.beta1); }}},
      {"train.beta2",
       {[](RunConfig& c, const json& v, const std::string& k) { c.train.beta2 = as_double(v, k); },
        [](const RunConfig& c) { return json(c.train.beta2); }}},
      {"train.epochs",
       {[](RunConfig& c, const json& v, const std::string& k) { c.train.epochs = as_int(v, k); },
        [](const RunConfig& c) { return json(c.train.epochs); }}},
      {"train.learning_rate",
       {[](RunConfig& c, const json& v, const std::string& k) {
          c.train.learning_rate = as_double(v, k);
        },
        [](const RunConfig& c) { return json(c.train.learning_rate); }}},
      {"train.seed",
       {[](RunConfig& c, const json& v, const std::string& k) { c.train.seed = as_u64(v, k); },
        [](const RunConfig& c) { return json(c.train.seed); }}},
  };
  return defs;
}

void set_field(RunConfig& config, const std::string& key, const json& value) {
  auto it = fields().find(key);
  if (it == fields().end()) fail("config: unknown key \"" + key + "\"");
  it->second.set(config, value, key);
}

void flatten_into(RunConfig& config, const std::string& prefix, const json& node) {
  if (!node.is_object()) {
    set_field(config, prefix, node);
    return;
  }
  for (const auto& [k, v] : node.items()) {
    flatten_into(config, prefix.empty() ? k : prefix + "." + k, v);
  }
}

}  // namespace

void RunConfig::merge_json_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(std::string("config: not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) fail("config: the top level must be a JSON object");
  flatten_into(*this, "", doc);
}

void RunConfig::override_key(const std::string& key, const std::string& value) {
  json v;
  if (value == "true" || value == "false") {
    v = (value == "true");
  } else {
    try {
      std::size_t used = 0;
      const long long i = std::stoll(value, &used);
      if (used == value.size()) {
        v = i;
      } else {
        const double d = std::stod(value, &used);
        v = (used == value.size()) ? json(d) : json(value);
      }
    } catch (const std::exception&) {
      v = value;
    }
  }
  set_field(*this, key, v);
}

std::string RunConfig::to_json() const {
  json doc;
  for (const auto& [key, def] : fields()) {
    json* node = &doc;
    std::string rest = key;
    for (std::size_t dot = rest.find('.'); dot != std::string::npos; dot = rest.find('.')) {
      node = &(*node)[rest.substr(0, dot)];
      rest = rest.substr(dot + 1);
    }
    (*node)[rest] = def.get(*this);
  }
  return doc.dump(2) + "\n";
}

std::vector<std::string> RunConfig::known_keys() {
  std::vector<std::string> keys;
  for (const auto& [key, def] : fields()) keys.push_back(key);
  return keys;
}

}  // namespace histoseg
