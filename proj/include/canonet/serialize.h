#ifndef CANONET_SERIALIZE_H_
#define CANONET_SERIALIZE_H_

#include <string>

#include <json.hpp>

#include "canonet/attack.h"
#include "canonet/channel_transform.h"
#include "canonet/graph.h"
#include "canonet/recovery.h"
#include "canonet/verifier.h"
#include "canonet/watermark.h"

namespace canonet {

using Json = nlohmann::json;

// Object keys come out sorted, numbers in shortest round-trip form, so equal
// values serialize to equal bytes. Parse failures throw Error(kIo) or
// Error(kInvalidArgument); nothing is ever partially accepted.

Json tensor_to_json(const Tensor& t);  // nested arrays, row-major
Tensor tensor_from_json(const Json& j);

Json graph_to_json(const Graph& g);
Graph graph_from_json(const Json& j);

Json transform_to_json(const ChannelTransform& m);
ChannelTransform transform_from_json(const Json& j);

// Projection rows are regenerated from the seed and never written.
Json key_to_json(const WatermarkKey& key);
WatermarkKey key_from_json(const Json& j);

Json to_json(const AttackConfig& c);
AttackConfig attack_config_from_json(const Json& j);
Json to_json(const RecoveryConfig& c);
RecoveryConfig recovery_config_from_json(const Json& j);
Json to_json(const ProbeConfig& c);
ProbeConfig probe_config_from_json(const Json& j);
Json to_json(const CertificateConfig& c);
CertificateConfig certificate_config_from_json(const Json& j);
Json to_json(const Tier2Config& c);
Tier2Config tier2_config_from_json(const Json& j);

// `timings` false drops every wall-clock field for byte-stable output.
Json to_json(const AttackReport& r, bool timings = true);
Json to_json(const RecoveryReport& r, bool timings = true);
Json to_json(const LayerCertificate& c);
Json to_json(const CertificateReport& r);
Json to_json(const VerdictReport& r);

std::string dump_json(const Json& j);  // two-space indent, trailing newline
Json read_json_file(const std::string& path);
void write_json_file(const std::string& path, const Json& j);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace canonet

#endif  // CANONET_SERIALIZE_H_
