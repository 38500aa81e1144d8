//! Token-anchored annotation XML, as shipped by EventStoryLine (ECB+ style,
//! `t_id`/`m_id` attributes) and Causal-TimeBank (`id` attributes).

use roxmltree::{Document as XmlDocument, Node};

use super::{Document, DocumentBuilder, PlotLinkPolicy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Flavor {
    EventStoryLine,
    CausalTimeBank,
}

fn attr<'a>(node: Node<'a, '_>, names: &[&str]) -> Option<&'a str> {
    names.iter().find_map(|n| node.attribute(*n))
}

fn is_event_markable(tag: &str) -> bool {
    tag == "EVENT" || tag.starts_with("ACTION_") || tag.starts_with("NEG_ACTION_")
}

fn is_true(node: Node<'_, '_>, name: &str) -> bool {
    node.attribute(name)
        .is_some_and(|v| v.eq_ignore_ascii_case("true"))
}

/// Topic id from the leading digits of the file name or its parent directory,
/// e.g. `1/1_10ecbplus.xml.xml` → 1. Causal-TimeBank has no topics (0).
fn topic_of(rel: &str, flavor: Flavor) -> Result<u32> {
    if flavor == Flavor::CausalTimeBank {
        return Ok(0);
    }
    let leading = |s: &str| -> Option<u32> {
        let digits: String = s.chars().take_while(|c| c.is_ascii_digit()).collect();
        digits.parse().ok()
    };
    let mut parts = rel.rsplit('/');
    let file = parts.next().unwrap_or(rel);
    leading(file)
        .or_else(|| parts.next().and_then(leading))
        .ok_or_else(|| Error::parse(rel, "file name", "cannot determine topic id"))
}

fn doc_id_of(rel: &str) -> String {
    let mut id = rel.to_string();
    while let Some(stripped) = id.strip_suffix(".xml") {
        id = stripped.to_string();
    }
    id
}

fn location(xml: &XmlDocument<'_>, node: Node<'_, '_>) -> String {
    let pos = xml.text_pos_at(node.range().start);
    format!("line {}, column {}", pos.row, pos.col)
}

pub(crate) fn parse_document(
    rel: &str,
    text: &str,
    flavor: Flavor,
    plot_links: PlotLinkPolicy,
) -> Result<Document> {
    let xml = XmlDocument::parse(text).map_err(|e| {
        let pos = e.pos();
        Error::parse(
            rel,
            format!("line {}, column {}", pos.row, pos.col),
            e.to_string(),
        )
    })?;
    let mut builder = DocumentBuilder::new(doc_id_of(rel), topic_of(rel, flavor)?);

    for node in xml.descendants().filter(|n| n.has_tag_name("token")) {
        let id = attr(node, &["t_id", "id"])
            .ok_or_else(|| Error::parse(rel, location(&xml, node), "token without id"))?;
        let sentence: usize = attr(node, &["sentence"])
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::parse(rel, location(&xml, node), "token without numeric sentence"))?;
        builder.token(id, sentence, node.text().unwrap_or(""));
    }

    let section = |name: &str| xml.descendants().find(|n| n.has_tag_name(name));
    if let Some(markables) = section("Markables") {
        for node in markables.children().filter(|n| n.is_element()) {
            if !is_event_markable(node.tag_name().name()) {
                continue;
            }
            let id = attr(node, &["m_id", "id"])
                .ok_or_else(|| Error::parse(rel, location(&xml, node), "markable without id"))?;
            let anchors: Vec<String> = node
                .children()
                .filter(|c| c.has_tag_name("token_anchor"))
                .filter_map(|c| attr(c, &["t_id", "id"]).map(str::to_string))
                .collect();
            // Markables without anchors are document-level placeholders.
            if anchors.is_empty() {
                continue;
            }
            builder.mention(id, anchors);
        }
    }

    let links = section("Relations").or_else(|| section("Links"));
    if let Some(links) = links {
        for node in links.children().filter(|n| n.is_element()) {
            let endpoint = |tag: &str| {
                node.children()
                    .find(|c| c.has_tag_name(tag))
                    .and_then(|c| attr(c, &["m_id", "id"]))
            };
            let (Some(src), Some(tgt)) = (endpoint("source"), endpoint("target")) else {
                continue;
            };
            let causal = match node.tag_name().name() {
                "CLINK" => true,
                "PLOT_LINK" => match plot_links {
                    PlotLinkPolicy::AnyPlotLink => true,
                    PlotLinkPolicy::ExplicitOnly => is_true(node, "CAUSES") || is_true(node, "CAUSED_BY"),
                },
                _ => false,
            };
            if causal {
                builder.causal(src, tgt);
            } else {
                builder.link(src, tgt);
            }
        }
    }

    builder
        .build()
        .map_err(|msg| Error::parse(rel, "annotations", msg))
}
