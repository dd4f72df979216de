//! Typed calls against the node APIs over any [`Transport`].

use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::broker::{QueryRequest, QueryResponse, Subscription};
use crate::discovery::{AvailabilitySubscription, DiscoveryQuery, Registration};
use crate::model::{from_value_typed, ContextElement};
use crate::net::{endpoint_url, to_value, Transport, TransportError};

fn call<T: DeserializeOwned>(
    t: &dyn Transport,
    endpoint: &str,
    path: &str,
    body: &Value,
    trace: &[String],
) -> Result<T, TransportError> {
    let v = t.request(&endpoint_url(endpoint, path), body, trace)?;
    from_value_typed(v).map_err(|e| TransportError::Protocol(e.to_string()))
}

fn field(v: &Value, name: &str) -> Result<String, TransportError> {
    v.get(name)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| TransportError::Protocol(format!("response lacks `{name}`")))
}

pub fn update(t: &dyn Transport, endpoint: &str, elements: &[ContextElement]) -> Result<Value, TransportError> {
    t.request(
        &endpoint_url(endpoint, "/v1/updateContext"),
        &json!({ "elements": elements }),
        &[],
    )
}

pub fn query(t: &dyn Transport, endpoint: &str, q: &QueryRequest, trace: &[String]) -> Result<QueryResponse, TransportError> {
    call(t, endpoint, "/v1/queryContext", &to_value(q), trace)
}

pub fn subscribe(t: &dyn Transport, endpoint: &str, s: &Subscription, trace: &[String]) -> Result<String, TransportError> {
    let v = t.request(&endpoint_url(endpoint, "/v1/subscribeContext"), &to_value(s), trace)?;
    field(&v, "subscriptionId")
}

pub fn unsubscribe(t: &dyn Transport, endpoint: &str, id: &str) -> Result<(), TransportError> {
    t.request(&endpoint_url(endpoint, "/v1/unsubscribeContext"), &json!({ "id": id }), &[])
        .map(|_| ())
}

pub fn register(t: &dyn Transport, discovery: &str, r: &Registration) -> Result<String, TransportError> {
    let v = t.request(&endpoint_url(discovery, "/v1/registerContext"), &to_value(r), &[])?;
    field(&v, "registrationId")
}

pub fn discover(t: &dyn Transport, discovery: &str, q: &DiscoveryQuery) -> Result<Vec<Registration>, TransportError> {
    #[derive(serde::Deserialize)]
    struct Found {
        registrations: Vec<Registration>,
    }
    call::<Found>(t, discovery, "/v1/discoverContextAvailability", &to_value(q), &[]).map(|f| f.registrations)
}

pub fn subscribe_availability(
    t: &dyn Transport,
    discovery: &str,
    s: &AvailabilitySubscription,
) -> Result<String, TransportError> {
    let v = t.request(&endpoint_url(discovery, "/v1/subscribeContextAvailability"), &to_value(s), &[])?;
    field(&v, "subscriptionId")
}

pub fn unsubscribe_availability(t: &dyn Transport, discovery: &str, id: &str) -> Result<(), TransportError> {
    t.request(
        &endpoint_url(discovery, "/v1/unsubscribeContextAvailability"),
        &json!({ "id": id }),
        &[],
    )
    .map(|_| ())
}
