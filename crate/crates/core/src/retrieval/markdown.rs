//! Deterministic HTML → markdown conversion.
//!
//! Keeps headings, paragraphs, lists, tables, preformatted blocks and link
//! text; drops scripts, styles and other non-content elements.

use ego_tree::NodeRef;
use scraper::{Html, Node};

const SKIPPED: &[&str] = &[
    "script", "style", "noscript", "template", "head", "svg", "iframe", "object", "canvas", "form",
    "button", "select", "input", "textarea",
];

const BLOCKS: &[&str] = &[
    "p", "div", "section", "article", "main", "header", "footer", "nav", "aside", "blockquote",
    "figure", "figcaption", "dl", "dt", "dd", "address", "hr", "body", "html",
];

pub fn html_to_markdown(html: &str) -> String {
    let doc = Html::parse_document(html);
    let mut w = Writer::default();
    w.children(doc.tree.root(), 0);
    finish(&w.out)
}

#[derive(Default)]
struct Writer {
    out: String,
}

impl Writer {
    fn blank_line(&mut self) {
        let trimmed = self.out.trim_end_matches([' ', '\t']).len();
        self.out.truncate(trimmed);
        if self.out.is_empty() {
            return;
        }
        while !self.out.ends_with("\n\n") {
            self.out.push('\n');
        }
    }

    fn newline(&mut self) {
        let trimmed = self.out.trim_end_matches([' ', '\t']).len();
        self.out.truncate(trimmed);
        if !self.out.is_empty() && !self.out.ends_with('\n') {
            self.out.push('\n');
        }
    }

    fn text(&mut self, raw: &str) {
        let mut pending_space = raw.starts_with(char::is_whitespace);
        for word in raw.split_whitespace() {
            if pending_space && !self.out.is_empty() && !self.out.ends_with([' ', '\n']) {
                self.out.push(' ');
            }
            self.out.push_str(word);
            pending_space = true;
        }
        if raw.ends_with(char::is_whitespace) && !raw.trim().is_empty() {
            self.out.push(' ');
        }
    }

    fn children(&mut self, node: NodeRef<'_, Node>, depth: usize) {
        for child in node.children() {
            self.node(child, depth);
        }
    }

    fn node(&mut self, node: NodeRef<'_, Node>, depth: usize) {
        match node.value() {
            Node::Text(t) => self.text(t),
            Node::Element(el) => {
                let name = el.name();
                if SKIPPED.contains(&name) {
                    return;
                }
                match name {
                    "h1" | "h2" | "h3" | "h4" | "h5" | "h6" => {
                        let level = name[1..].parse::<usize>().unwrap_or(1);
                        let text = inline_text(node);
                        if !text.is_empty() {
                            self.blank_line();
                            self.out.push_str(&"#".repeat(level));
                            self.out.push(' ');
                            self.out.push_str(&text);
                            self.blank_line();
                        }
                    }
                    "br" => self.newline(),
                    "ul" | "ol" => {
                        if depth == 0 {
                            self.blank_line();
                        } else {
                            self.newline();
                        }
                        self.list(node, name == "ol", depth);
                        if depth == 0 {
                            self.blank_line();
                        }
                    }
                    "table" => {
                        self.blank_line();
                        self.table(node);
                        self.blank_line();
                    }
                    "pre" => {
                        let code: String = node
                            .descendants()
                            .filter_map(|n| match n.value() {
                                Node::Text(t) => Some(&**t),
                                _ => None,
                            })
                            .collect();
                        self.blank_line();
                        self.out.push_str("```\n");
                        self.out.push_str(code.trim_matches('\n'));
                        self.out.push_str("\n```");
                        self.blank_line();
                    }
                    "img" => {
                        if let Some(alt) = el.attr("alt").map(str::trim).filter(|a| !a.is_empty()) {
                            self.text(alt);
                        }
                    }
                    "li" => {
                        // stray <li> outside a list
                        self.newline();
                        self.out.push_str("- ");
                        self.children(node, depth);
                        self.newline();
                    }
                    "tr" | "td" | "th" | "tbody" | "thead" => self.children(node, depth),
                    _ if BLOCKS.contains(&name) => {
                        self.blank_line();
                        self.children(node, depth);
                        self.blank_line();
                    }
                    _ => self.children(node, depth),
                }
            }
            Node::Document | Node::Fragment => self.children(node, depth),
            _ => {}
        }
    }

    fn list(&mut self, node: NodeRef<'_, Node>, ordered: bool, depth: usize) {
        let indent = "  ".repeat(depth);
        let mut n = 0;
        for item in node.children() {
            let Node::Element(el) = item.value() else { continue };
            if el.name() != "li" {
                continue;
            }
            n += 1;
            self.newline();
            self.out.push_str(&indent);
            if ordered {
                self.out.push_str(&format!("{n}. "));
            } else {
                self.out.push_str("- ");
            }
            for child in item.children() {
                match child.value() {
                    Node::Element(e) if matches!(e.name(), "ul" | "ol") => {
                        self.newline();
                        self.list(child, e.name() == "ol", depth + 1);
                    }
                    Node::Element(e) if BLOCKS.contains(&e.name()) => self.children(child, depth + 1),
                    _ => self.node(child, depth + 1),
                }
            }
            self.newline();
        }
    }

    fn table(&mut self, node: NodeRef<'_, Node>) {
        let rows: Vec<Vec<String>> = node
            .descendants()
            .filter(|n| matches!(n.value(), Node::Element(e) if e.name() == "tr"))
            .map(|tr| {
                tr.children()
                    .filter(|c| matches!(c.value(), Node::Element(e) if matches!(e.name(), "td" | "th")))
                    .map(|c| inline_text(c).replace('|', "\\|"))
                    .collect::<Vec<_>>()
            })
            .filter(|r| !r.is_empty())
            .collect();
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        for (i, row) in rows.iter().enumerate() {
            let mut cells = row.clone();
            cells.resize(width, String::new());
            self.out.push_str("| ");
            self.out.push_str(&cells.join(" | "));
            self.out.push_str(" |\n");
            if i == 0 {
                self.out.push('|');
                self.out.push_str(&" --- |".repeat(width));
                self.out.push('\n');
            }
        }
    }
}

fn inline_text(node: NodeRef<'_, Node>) -> String {
    let mut w = Writer::default();
    w.children(node, 0);
    w.out.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn finish(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut blank_run = 0;
    for line in raw.lines() {
        let line = line.trim_end();
        if line.trim().is_empty() {
            blank_run += 1;
            if blank_run > 1 {
                continue;
            }
            out.push('\n');
        } else {
            blank_run = 0;
            out.push_str(line);
            out.push('\n');
        }
    }
    out.trim().to_string()
}
