/// Renders a GitHub-style Markdown table.
pub fn markdown_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = format!("| {} |\n", header.join(" | "));
    out.push_str(&format!(
        "|{}\n",
        header.iter().map(|_| "---|").collect::<String>()
    ));
    for r in rows {
        out.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    out
}

pub fn fmt3(x: f64) -> String {
    format!("{x:.3}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let t = markdown_table(&["Fold", "Valence"], &[vec!["0".into(), fmt3(0.3104)]]);
        assert_eq!(t, "| Fold | Valence |\n|---|---|\n| 0 | 0.310 |\n");
    }
}
