//! CoNLL-2002/2003 column files and CoNLL-U dependency files.

use std::io::{BufRead, Write};

use super::{
    AlphabetRole, Corpus, Gold, HeadAssignment, LabelAlphabet, Provenance, SentenceRecord,
    TagSequence,
};
use crate::error::{Error, Result};

fn parse_err<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        line,
        msg: msg.into(),
    })
}

/// Reads whitespace-separated NER columns: first column the token, last
/// column the tag. Sentences are separated by blank lines and `-DOCSTART-`
/// lines are ignored. A sentence whose lines have a single column is read
/// as unlabeled.
pub fn read_conll_ner<R: BufRead>(source: R) -> Result<Corpus> {
    let mut labels = LabelAlphabet::new(AlphabetRole::Tags);
    let mut records = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut width: Option<usize> = None;
    let mut first_line = 0;

    let mut flush = |tokens: &mut Vec<String>,
                     tags: &mut Vec<String>,
                     width: &mut Option<usize>,
                     labels: &mut LabelAlphabet,
                     line: usize|
     -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let gold = if *width == Some(1) {
            None
        } else {
            Some(Gold::Tags(TagSequence(
                tags.iter().map(|t| labels.intern(t)).collect(),
            )))
        };
        let rec = SentenceRecord::new(std::mem::take(tokens), gold, Provenance::Labeled)
            .or_else(|e| parse_err(line, e.to_string()))?;
        records.push(rec);
        tags.clear();
        *width = None;
        Ok(())
    };

    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut tokens, &mut tags, &mut width, &mut labels, first_line)?;
            continue;
        }
        if trimmed.starts_with("-DOCSTART-") {
            continue;
        }
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        match width {
            None => {
                width = Some(cols.len());
                first_line = lineno;
            }
            Some(w) if w != cols.len() => {
                return parse_err(
                    lineno,
                    format!("expected {} columns, found {}", w, cols.len()),
                )
            }
            _ => {}
        }
        tokens.push(cols[0].to_owned());
        tags.push(cols[cols.len() - 1].to_owned());
    }
    flush(&mut tokens, &mut tags, &mut width, &mut labels, first_line)?;
    Ok(Corpus { records, labels })
}

/// Reads CoNLL-U. Only ID, FORM, HEAD and DEPREL are consumed; multiword
/// ranges and empty nodes are skipped. A sentence whose HEAD column is `_`
/// throughout is read as unlabeled.
pub fn read_conllu<R: BufRead>(source: R) -> Result<Corpus> {
    let mut labels = LabelAlphabet::new(AlphabetRole::Relations);
    let mut records = Vec::new();
    // (form, head, deprel, line)
    let mut rows: Vec<(String, Option<usize>, String, usize)> = Vec::new();

    let mut flush = |rows: &mut Vec<(String, Option<usize>, String, usize)>,
                     labels: &mut LabelAlphabet|
     -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let line = rows[0].3;
        let unlabeled = rows.iter().all(|r| r.1.is_none());
        let gold = if unlabeled {
            None
        } else {
            let mut heads = Vec::with_capacity(rows.len());
            let mut rels = Vec::with_capacity(rows.len());
            for r in rows.iter() {
                match r.1 {
                    Some(h) => heads.push(h),
                    None => return parse_err(r.3, "HEAD is `_` in an annotated sentence"),
                }
                rels.push(labels.intern(&r.2));
            }
            Some(Gold::Heads(HeadAssignment { heads, rels }))
        };
        let tokens = rows.drain(..).map(|r| r.0).collect();
        let rec = SentenceRecord::new(tokens, gold, Provenance::Labeled)
            .or_else(|e| parse_err(line, e.to_string()))?;
        records.push(rec);
        Ok(())
    };

    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            flush(&mut rows, &mut labels)?;
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').collect();
        if cols.len() != 10 {
            return parse_err(lineno, format!("expected 10 columns, found {}", cols.len()));
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let id: usize = cols[0]
            .parse()
            .or_else(|_| parse_err(lineno, format!("non-integer ID {:?}", cols[0])))?;
        if id != rows.len() + 1 {
            return parse_err(lineno, format!("token ID {} out of sequence", id));
        }
        let head = if cols[6] == "_" {
            None
        } else {
            Some(
                cols[6]
                    .parse()
                    .or_else(|_| parse_err(lineno, format!("non-integer HEAD {:?}", cols[6])))?,
            )
        };
        rows.push((cols[1].to_owned(), head, cols[7].to_owned(), lineno));
    }
    flush(&mut rows, &mut labels)?;
    Ok(Corpus { records, labels })
}

/// Writes `token tag` lines; unlabeled sentences are written with the token
/// column only.
pub fn write_conll_ner<W: Write>(out: &mut W, corpus: &Corpus) -> Result<()> {
    for rec in &corpus.records {
        match rec.tags() {
            Some(tags) => {
                for (tok, &t) in rec.tokens.iter().zip(&tags.0) {
                    let tag = corpus
                        .labels
                        .label(t)
                        .ok_or_else(|| Error::Usage(format!("tag id {t} not in alphabet")))?;
                    writeln!(out, "{tok} {tag}")?;
                }
            }
            None => {
                for tok in &rec.tokens {
                    writeln!(out, "{tok}")?;
                }
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Writes CoNLL-U with ID, FORM, HEAD and DEPREL filled in.
pub fn write_conllu<W: Write>(out: &mut W, corpus: &Corpus) -> Result<()> {
    for rec in &corpus.records {
        for (k, tok) in rec.tokens.iter().enumerate() {
            let (head, rel) = match rec.heads() {
                Some(h) => (
                    h.heads[k].to_string(),
                    corpus
                        .labels
                        .label(h.rels[k])
                        .ok_or_else(|| Error::Usage(format!("relation id {} not in alphabet", h.rels[k])))?
                        .to_owned(),
                ),
                None => ("_".to_owned(), "_".to_owned()),
            };
            writeln!(out, "{}\t{}\t_\t_\t_\t_\t{}\t{}\t_\t_", k + 1, tok, head, rel)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ner_single_sentence() {
        let c = read_conll_ner("John B-PER\nruns O\n\n".as_bytes()).unwrap();
        assert_eq!(c.records.len(), 1);
        let r = &c.records[0];
        assert_eq!(r.tokens, ["John", "runs"]);
        let tags: Vec<&str> = r.tags().unwrap().0.iter().map(|&t| c.labels.label(t).unwrap()).collect();
        assert_eq!(tags, ["B-PER", "O"]);
    }

    #[test]
    fn ner_empty_and_docstart() {
        assert!(read_conll_ner("".as_bytes()).unwrap().records.is_empty());
        let c = read_conll_ner("-DOCSTART- -X- O O\n\nA NN O\nb NN O\n\nc NN S-LOC\n".as_bytes()).unwrap();
        assert_eq!(c.records.len(), 2);
        assert_eq!(c.records[0].len(), 2);
        assert_eq!(c.records[1].len(), 1);
    }

    #[test]
    fn ner_ragged_reports_line() {
        let err = read_conll_ner("a X O\nb O\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn ner_unlabeled_tokens() {
        let c = read_conll_ner("a\nb\n\n".as_bytes()).unwrap();
        assert_eq!(c.records[0].gold, None);
    }

    #[test]
    fn conllu_root_only() {
        let c = read_conllu("1\tgo\t_\t_\t_\t_\t0\troot\t_\t_\n\n".as_bytes()).unwrap();
        let h = c.records[0].heads().unwrap();
        assert_eq!(h.heads, [0]);
        assert_eq!(c.labels.label(h.rels[0]), Some("root"));
    }

    #[test]
    fn conllu_comments_and_multiword() {
        assert!(read_conllu("# sent_id = 1\n# text = x\n".as_bytes()).unwrap().records.is_empty());
        let src = "# c\n1-2\tdel\t_\t_\t_\t_\t_\t_\t_\t_\n1\tthe\t_\t_\t_\t_\t2\tdet\t_\t_\n2\tdog\t_\t_\t_\t_\t0\troot\t_\t_\n";
        let c = read_conllu(src.as_bytes()).unwrap();
        assert_eq!(c.records[0].heads().unwrap().heads, [2, 0]);
    }

    #[test]
    fn conllu_bad_head() {
        let err = read_conllu("1\tx\t_\t_\t_\t_\tzero\troot\t_\t_\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn writers_roundtrip() {
        let src = "1\tthe\t_\t_\t_\t_\t2\tdet\t_\t_\n2\tdog\t_\t_\t_\t_\t0\troot\t_\t_\n\n";
        let c = read_conllu(src.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_conllu(&mut buf, &c).unwrap();
        assert_eq!(read_conllu(buf.as_slice()).unwrap(), c);

        let c = read_conll_ner("John B-PER\nSmith E-PER\nran O\n\nx O\n\n".as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_conll_ner(&mut buf, &c).unwrap();
        assert_eq!(read_conll_ner(buf.as_slice()).unwrap(), c);
    }
}
